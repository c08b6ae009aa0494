//! Incremental single-token decoding against the unified cache.

use super::cache::{CacheEntry, UnifiedKVCache};
use super::params::{Linear, Model};
use super::vocab::ModalityTag;
use super::ModelError;
use crate::num::kernels::{dot, inv_rms, rope_row, silu, softmax_in_place};
use crate::num::{Float, NumError};

/// Optional instrumentation of one [`forward_token`] call.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    /// Weight tensors read, per expert.
    pub param_reads: Vec<usize>,
    /// `[layer][head][cache entry]` attention weights.
    pub attention: Vec<Vec<Vec<Float>>>,
    /// Cache positions the attention columns refer to.
    pub positions: Vec<usize>,
    /// Final normalised hidden state.
    pub hidden: Vec<Float>,
}

fn norm_row(x: &[Float], gain: &[Float]) -> Vec<Float> {
    let r = inv_rms(x);
    x.iter().zip(gain).map(|(v, g)| v * (r * g)).collect()
}

fn lin(p: &Linear, x: &[Float]) -> Vec<Float> {
    let mut out = vec![0.0; p.d_out()];
    p.apply_row(x, &mut out);
    out
}

/// Run one token through its routed expert, appending to the cache.
/// Returns logits over that expert's output vocabulary.
pub fn forward_token(
    model: &Model,
    cache: &mut UnifiedKVCache,
    token: usize,
    tag: ModalityTag,
    tick: usize,
    position: usize,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<Vec<Float>, ModelError> {
    if position != cache.next_position() {
        return Err(ModelError::Sequencing {
            expected: cache.next_position(),
            found: position,
        });
    }
    let c = &model.config;
    let layout = c.layout();
    let ei = model.expert_index(tag);
    let e = &model.experts[ei];
    if !layout.accepts(tag, token) {
        return Err(ModelError::Vocab {
            token,
            expert: format!("{} under tag {tag}", e.name),
        });
    }
    let mut x = e.embed_row(token)?.to_vec();
    cache.push_entry(CacheEntry {
        position,
        tick,
        expert: ei,
        tag,
    });
    let mut reads = 1;
    if let Some(t) = trace.as_deref_mut() {
        t.attention.clear();
        t.positions = cache.entries().iter().map(|e| e.position).collect();
    }

    let (nh, nkv, dh) = (c.n_heads, c.n_kv_heads, c.d_head);
    let group = nh / nkv;
    let kv_dim = c.kv_dim();
    let scale = 1.0 / (dh as Float).sqrt();
    for (li, layer) in e.layers.iter().enumerate() {
        let h = norm_row(&x, layer.attn_norm.data());
        let mut q = lin(&layer.wq, &h);
        let mut k = lin(&layer.wk, &h);
        let v = lin(&layer.wv, &h);
        rope_row(&mut q, dh, position as Float, e.rope_theta, 1.0);
        rope_row(&mut k, dh, position as Float, e.rope_theta, 1.0);
        cache.push_kv(li, &k, &v);

        let n = cache.layer_len(li);
        let keys = cache.keys_layer(li);
        let values = cache.values_layer(li);
        let mut att = vec![0.0; nh * dh];
        let mut head_weights = Vec::new();
        for hh in 0..nh {
            let kvh = hh / group;
            let qh = &q[hh * dh..(hh + 1) * dh];
            let mut w: Vec<Float> = (0..n)
                .map(|j| dot(qh, &keys[j * kv_dim + kvh * dh..j * kv_dim + (kvh + 1) * dh]) * scale)
                .collect();
            softmax_in_place(&mut w);
            let out = &mut att[hh * dh..(hh + 1) * dh];
            for (j, &p) in w.iter().enumerate() {
                if p != 0.0 {
                    let vr = &values[j * kv_dim + kvh * dh..j * kv_dim + (kvh + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(vr) {
                        *o += p * vv;
                    }
                }
            }
            if trace.is_some() {
                head_weights.push(w);
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.attention.push(head_weights);
        }
        let o = lin(&layer.wo, &att);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

        let h2 = norm_row(&x, layer.ffn_norm.data());
        let g = lin(&layer.w_gate, &h2);
        let u = lin(&layer.w_up, &h2);
        let s: Vec<Float> = g.iter().zip(&u).map(|(&g, &u)| silu(g) * u).collect();
        let d = lin(&layer.w_down, &s);
        x.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        reads += 9;
    }
    let hf = norm_row(&x, e.final_norm.data());
    let nout = e.output.len();
    let mut logits = vec![0.0; nout];
    let ud = e.unembed.data();
    for (i, &hv) in hf.iter().enumerate() {
        for (l, &u) in logits.iter_mut().zip(&ud[i * nout..(i + 1) * nout]) {
            *l += hv * u;
        }
    }
    reads += 2;
    if cfg!(debug_assertions) && !logits.iter().all(|v| v.is_finite()) {
        return Err(NumError::NonFinite { op: "forward_token" }.into());
    }
    if let Some(t) = trace {
        t.param_reads = vec![0; model.experts.len()];
        t.param_reads[ei] = reads;
        t.hidden = hf;
    }
    Ok(logits)
}

/// Feed a run of tokens at consecutive positions; returns the last logits.
pub fn feed(
    model: &Model,
    cache: &mut UnifiedKVCache,
    tokens: &[(usize, ModalityTag)],
    tick: usize,
) -> Result<Option<Vec<Float>>, ModelError> {
    let mut last = None;
    for &(id, tag) in tokens {
        let p = cache.next_position();
        last = Some(forward_token(model, cache, id, tag, tick, p, None)?);
    }
    Ok(last)
}
