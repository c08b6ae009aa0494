//! Reverse-mode tape. Nodes are appended in evaluation order, so the node
//! vector is already a topological order and `backward` walks it once in
//! reverse.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, inv_rms, matmul_nt_into, matmul_tn_into, rope_row, sigmoid, silu};
use super::tensor::check_finite;
use super::{Float, NumError, Result, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    graph: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

/// Causal attention visibility. Key `k` is visible to query `q` only if
/// `k <= q` and the extra predicate allowed it at construction.
#[derive(Clone, Debug)]
pub struct AttnMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, |_, _| true)
    }

    pub fn from_fn(n: usize, visible: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = vec![false; n * n];
        for q in 0..n {
            for k in 0..=q {
                allowed[q * n + k] = visible(q, k);
            }
        }
        Self { n, allowed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn visible(&self, q: usize, k: usize) -> bool {
        k <= q && self.allowed[q * self.n + k]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, Float),
    RmsNorm { x: Var, gain: Var, inv: Vec<Float> },
    Rope { x: Var, positions: Vec<usize>, theta: Float, d_head: usize },
    SwiGlu { gate: Var, up: Var },
    GatherRows { x: Var, rows: Vec<usize> },
    MergeRows { parts: Vec<(Var, Vec<usize>)> },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, mask: AttnMask, probs: Vec<Float> },
    CrossEntropySum { logits: Var, targets: Vec<Option<usize>>, probs: Vec<Float> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.id >= self.nodes.len() {
            return Err(NumError::Structural(format!(
                "variable {} does not belong to this tape (detached tensor)",
                v.id
            )));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var {
            id: self.nodes.len() - 1,
            graph: self.id,
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NumError::Shape {
                op: "add",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut value = va.clone();
        value.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: Float) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).scaled(c);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Scale(a, c), rg))
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        let (vx, vg) = (self.value(x), self.value(gain));
        let d = vx.cols();
        if vg.len() != d || d == 0 {
            return Err(NumError::Shape {
                op: "rmsnorm",
                left: vx.shape().to_vec(),
                right: vg.shape().to_vec(),
            });
        }
        let mut value = vx.clone();
        let mut inv = Vec::with_capacity(vx.rows());
        for row in value.data_mut().chunks_mut(d) {
            let r = inv_rms(row);
            inv.push(r);
            for (v, g) in row.iter_mut().zip(vg.data()) {
                *v *= r * g;
            }
        }
        check_finite("rmsnorm", value.data())?;
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv }, rg))
    }

    /// Rotary embedding where row `i` of `x` (all heads concatenated) sits at
    /// `positions[i]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], theta: Float, d_head: usize) -> Result<Var> {
        self.check(x)?;
        if d_head % 2 != 0 {
            return Err(NumError::Config(format!("rope needs an even head dimension, got {d_head}")));
        }
        let vx = self.value(x);
        if vx.rows() != positions.len() || vx.cols() % d_head != 0 {
            return Err(NumError::Shape {
                op: "rope",
                left: vx.shape().to_vec(),
                right: vec![positions.len(), d_head],
            });
        }
        let mut value = vx.clone();
        let cols = value.cols();
        for (row, &p) in value.data_mut().chunks_mut(cols).zip(positions) {
            rope_row(row, d_head, p as Float, theta, 1.0);
        }
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                theta,
                d_head,
            },
            rg,
        ))
    }

    /// `silu(gate) ⊙ up`.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        self.check(gate)?;
        self.check(up)?;
        let (vg, vu) = (self.value(gate), self.value(up));
        if vg.shape() != vu.shape() {
            return Err(NumError::Shape {
                op: "swiglu",
                left: vg.shape().to_vec(),
                right: vu.shape().to_vec(),
            });
        }
        let data = vg.data().iter().zip(vu.data()).map(|(&g, &u)| silu(g) * u).collect();
        let value = Tensor::new(vg.shape().to_vec(), data)?;
        check_finite("swiglu", value.data())?;
        let rg = self.rg(gate) || self.rg(up);
        Ok(self.push(value, Op::SwiGlu { gate, up }, rg))
    }

    /// Select rows of a matrix (also serves as the embedding lookup).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.check(x)?;
        let vx = self.value(x);
        let n = vx.rows();
        let c = vx.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(NumError::Config(format!("row {r} out of range for {n} rows")));
            }
            data.extend_from_slice(vx.row(r));
        }
        let value = Tensor::new(vec![rows.len(), c], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Interleave row blocks back into one `[n × c]` matrix. Every output row
    /// must be written exactly once.
    pub fn merge_rows(&mut self, parts: &[(Var, Vec<usize>)], n: usize) -> Result<Var> {
        let mut c = None;
        let mut seen = vec![false; n];
        for (v, rows) in parts {
            self.check(*v)?;
            let vv = self.value(*v);
            if vv.rows() != rows.len() && !rows.is_empty() {
                return Err(NumError::Shape {
                    op: "merge_rows",
                    left: vv.shape().to_vec(),
                    right: vec![rows.len()],
                });
            }
            if !rows.is_empty() {
                match c {
                    None => c = Some(vv.cols()),
                    Some(c0) if c0 != vv.cols() => {
                        return Err(NumError::Shape {
                            op: "merge_rows",
                            left: vec![c0],
                            right: vv.shape().to_vec(),
                        })
                    }
                    _ => {}
                }
            }
            for &r in rows {
                if r >= n || seen[r] {
                    return Err(NumError::Structural(format!("merge_rows: row {r} duplicated or out of range")));
                }
                seen[r] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(NumError::Structural("merge_rows: output row left unset".into()));
        }
        let c = c.unwrap_or(0);
        let mut value = Tensor::zeros(&[n, c]);
        let mut rg = false;
        for (v, rows) in parts {
            let vv = &self.nodes[v.id].value;
            for (i, &r) in rows.iter().enumerate() {
                value.row_mut(r).copy_from_slice(vv.row(i));
            }
            rg |= self.nodes[v.id].requires_grad;
        }
        Ok(self.push(value, Op::MergeRows { parts: parts.to_vec() }, rg))
    }

    /// Grouped-query scaled dot-product attention. `q` is `[T × H·dh]`,
    /// `k` and `v` are `[T × Hkv·dh]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape, mask: AttnMask) -> Result<Var> {
        self.check(q)?;
        self.check(k)?;
        self.check(v)?;
        let AttnShape {
            n_heads,
            n_kv_heads,
            d_head,
        } = shape;
        if n_kv_heads == 0 || n_heads % n_kv_heads != 0 {
            return Err(NumError::Config(format!(
                "{n_heads} query heads not divisible into {n_kv_heads} kv heads"
            )));
        }
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let t = vq.rows();
        if vq.cols() != n_heads * d_head
            || vk.cols() != n_kv_heads * d_head
            || vv.shape() != vk.shape()
            || vk.rows() != t
            || mask.len() != t
        {
            return Err(NumError::Shape {
                op: "attention",
                left: vq.shape().to_vec(),
                right: vk.shape().to_vec(),
            });
        }
        let group = n_heads / n_kv_heads;
        let scale = 1.0 / (d_head as Float).sqrt();
        let tri = t * (t + 1) / 2;
        let mut probs = vec![0.0; tri * n_heads];
        let mut out = vec![0.0; t * n_heads * d_head];
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let (qc, kc) = (n_heads * d_head, n_kv_heads * d_head);
        let mut scores = vec![0.0; t];
        for h in 0..n_heads {
            let kvh = h / group;
            for i in 0..t {
                let qrow = &qd[i * qc + h * d_head..i * qc + (h + 1) * d_head];
                let mut max = Float::NEG_INFINITY;
                for j in 0..=i {
                    if mask.visible(i, j) {
                        let krow = &kd[j * kc + kvh * d_head..j * kc + (kvh + 1) * d_head];
                        let s = kernels::dot(qrow, krow) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                }
                if max == Float::NEG_INFINITY {
                    return Err(NumError::Structural(format!("attention row {i} has no visible key")));
                }
                let base = h * tri + i * (i + 1) / 2;
                let mut sum = 0.0;
                for j in 0..=i {
                    if mask.visible(i, j) {
                        let e = (scores[j] - max).exp();
                        probs[base + j] = e;
                        sum += e;
                    }
                }
                let orow = &mut out[i * qc + h * d_head..i * qc + (h + 1) * d_head];
                for j in 0..=i {
                    let p = probs[base + j] / sum;
                    probs[base + j] = p;
                    if p != 0.0 {
                        let vrow = &vd[j * kc + kvh * d_head..j * kc + (kvh + 1) * d_head];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![t, qc], out)?;
        check_finite("attention", value.data())?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                shape,
                mask,
                probs,
            },
            rg,
        ))
    }

    /// Sum over rows with a target of `−log softmax(logits)[target]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        self.check(logits)?;
        let vl = self.value(logits);
        let (t, v) = (vl.rows(), vl.cols());
        if targets.len() != t {
            return Err(NumError::Shape {
                op: "cross_entropy",
                left: vl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            if let Some(tg) = *target {
                if tg >= v {
                    return Err(NumError::Config(format!("target {tg} outside vocab of {v}")));
                }
                let row = vl.row(i);
                total += kernels::nll_row(row, tg);
                let p = &mut probs[i * v..(i + 1) * v];
                p.copy_from_slice(row);
                kernels::softmax_in_place(p);
            }
        }
        let value = Tensor::scalar(total);
        check_finite("cross_entropy", value.data())?;
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse-mode pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check(output)?;
        if self.value(output).len() != 1 {
            return Err(NumError::Structural(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::filled(self.value(output).shape(), 1.0));
        for id in (0..=output.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [Float])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.id];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("initialised").data_mut());
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                self.accumulate(grads, *a, |ga| matmul_nt_into(gd, vb.data(), ga, m, n, k));
                self.accumulate(grads, *b, |gb| matmul_tn_into(va.data(), gd, gb, m, k, n));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |gv| {
                        for (x, y) in gv.iter_mut().zip(gd) {
                            *x += y;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(gd) {
                        *x += c * y;
                    }
                });
            }
            Op::RmsNorm { x, gain, inv } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let d = vx.cols();
                let gain_d = vg.data();
                self.accumulate(grads, *gain, |gg| {
                    for ((xr, gr), r) in vx.data().chunks(d).zip(gd.chunks(d)).zip(inv) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j] * r;
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for (((xr, gr), r), out) in vx.data().chunks(d).zip(gd.chunks(d)).zip(inv).zip(gx.chunks_mut(d)) {
                        let s: Float = (0..d).map(|j| gr[j] * gain_d[j] * xr[j]).sum();
                        let r3 = r * r * r / d as Float;
                        for j in 0..d {
                            out[j] += r * gain_d[j] * gr[j] - r3 * xr[j] * s;
                        }
                    }
                });
            }
            Op::Rope {
                x,
                positions,
                theta,
                d_head,
            } => {
                let c = g.cols();
                self.accumulate(grads, *x, |gx| {
                    let mut tmp = vec![0.0; c];
                    for ((gr, out), &p) in gd.chunks(c).zip(gx.chunks_mut(c)).zip(positions) {
                        tmp.copy_from_slice(gr);
                        rope_row(&mut tmp, *d_head, p as Float, *theta, -1.0);
                        for (o, t) in out.iter_mut().zip(&tmp) {
                            *o += t;
                        }
                    }
                });
            }
            Op::SwiGlu { gate, up } => {
                let (vg, vu) = (self.value(*gate), self.value(*up));
                self.accumulate(grads, *up, |gu| {
                    for ((o, &x), &dy) in gu.iter_mut().zip(vg.data()).zip(gd) {
                        *o += dy * silu(x);
                    }
                });
                self.accumulate(grads, *gate, |gg| {
                    for (((o, &x), &u), &dy) in gg.iter_mut().zip(vg.data()).zip(vu.data()).zip(gd) {
                        let s = sigmoid(x);
                        *o += dy * u * s * (1.0 + x * (1.0 - s));
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let c = g.cols();
                self.accumulate(grads, *x, |gx| {
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, y) in gx[r * c..(r + 1) * c].iter_mut().zip(&gd[i * c..(i + 1) * c]) {
                            *o += y;
                        }
                    }
                });
            }
            Op::MergeRows { parts } => {
                let c = g.cols();
                for (v, rows) in parts {
                    self.accumulate(grads, *v, |gv| {
                        for (i, &r) in rows.iter().enumerate() {
                            for (o, y) in gv[i * c..(i + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                                *o += y;
                            }
                        }
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                mask,
                probs,
            } => self.attention_backward(*q, *k, *v, *shape, mask, probs, gd, grads),
            Op::CrossEntropySum { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                let scale = gd[0];
                self.accumulate(grads, *logits, |gl| {
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(tg) = *t {
                            let row = &mut gl[i * c..(i + 1) * c];
                            for (o, p) in row.iter_mut().zip(&probs[i * c..(i + 1) * c]) {
                                *o += scale * p;
                            }
                            row[tg] -= scale;
                        }
                    }
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        mask: &AttnMask,
        probs: &[Float],
        gd: &[Float],
        grads: &mut [Option<Tensor>],
    ) {
        let AttnShape {
            n_heads,
            n_kv_heads,
            d_head,
        } = shape;
        let group = n_heads / n_kv_heads;
        let scale = 1.0 / (d_head as Float).sqrt();
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let t = vq.rows();
        let tri = t * (t + 1) / 2;
        let (qc, kc) = (n_heads * d_head, n_kv_heads * d_head);
        let mut dq = vec![0.0; vq.len()];
        let mut dk = vec![0.0; vk.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; t];
        for h in 0..n_heads {
            let kvh = h / group;
            for i in 0..t {
                let base = h * tri + i * (i + 1) / 2;
                let go = &gd[i * qc + h * d_head..i * qc + (h + 1) * d_head];
                let mut weighted = 0.0;
                for j in 0..=i {
                    if !mask.visible(i, j) {
                        continue;
                    }
                    let p = probs[base + j];
                    let vrow = &vv.data()[j * kc + kvh * d_head..j * kc + (kvh + 1) * d_head];
                    let d = kernels::dot(go, vrow);
                    dp[j] = d;
                    weighted += p * d;
                    let dvrow = &mut dv[j * kc + kvh * d_head..j * kc + (kvh + 1) * d_head];
                    for (o, &x) in dvrow.iter_mut().zip(go) {
                        *o += p * x;
                    }
                }
                let qrow = &vq.data()[i * qc + h * d_head..i * qc + (h + 1) * d_head];
                for j in 0..=i {
                    if !mask.visible(i, j) {
                        continue;
                    }
                    let ds = probs[base + j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &vk.data()[j * kc + kvh * d_head..j * kc + (kvh + 1) * d_head];
                    let dqrow = &mut dq[i * qc + h * d_head..i * qc + (h + 1) * d_head];
                    for (o, &x) in dqrow.iter_mut().zip(krow) {
                        *o += ds * x;
                    }
                    let dkrow = &mut dk[j * kc + kvh * d_head..j * kc + (kvh + 1) * d_head];
                    for (o, &x) in dkrow.iter_mut().zip(qrow) {
                        *o += ds * x;
                    }
                }
            }
        }
        for (var, src) in [(q, dq), (k, dk), (v, dv)] {
            self.accumulate(grads, var, |gx| {
                for (o, s) in gx.iter_mut().zip(&src) {
                    *o += s;
                }
            });
        }
    }
}
