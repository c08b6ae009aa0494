//! Whole-sequence forward on the autodiff tape (teacher forcing).

use super::params::{Model, ParamInfo};
use super::vocab::ModalityTag;
use super::ModelError;
use crate::num::{AttnMask, AttnShape, Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqToken {
    pub id: usize,
    pub tag: ModalityTag,
    pub tick: usize,
}

/// Causal mask that hides vision/action keys older than `horizon` ticks
/// relative to the querying token. `None` keeps everything.
pub fn history_mask(tokens: &[SeqToken], horizon: Option<usize>) -> AttnMask {
    match horizon {
        None => AttnMask::causal(tokens.len()),
        Some(h) => AttnMask::from_fn(tokens.len(), |q, k| {
            let tk = tokens[k];
            !tk.tag.is_windowed() || tk.tick + h >= tokens[q].tick
        }),
    }
}

struct LinVars {
    w: Var,
    lora: Option<(Var, Var, Float)>,
}

struct LayerVars {
    attn_norm: Var,
    wq: LinVars,
    wk: LinVars,
    wv: LinVars,
    wo: LinVars,
    ffn_norm: Var,
    w_gate: LinVars,
    w_up: LinVars,
    w_down: LinVars,
}

struct ExpertVars {
    embed: Var,
    layers: Vec<LayerVars>,
    final_norm: Var,
    unembed: Var,
}

/// Graph leaves for every model tensor, in [`Model::walk`] order.
pub struct ParamVars {
    pub vars: Vec<Var>,
    pub infos: Vec<ParamInfo>,
    experts: Vec<ExpertVars>,
}

impl ParamVars {
    pub fn register(model: &Model, g: &mut Graph, trainable: &dyn Fn(&ParamInfo) -> bool) -> Self {
        let mut vars = Vec::new();
        let mut infos = Vec::new();
        model.walk(&mut |info, t| {
            let v = if trainable(&info) {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            vars.push(v);
            infos.push(info);
        });
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("walk order matches model structure");
        let mut experts = Vec::new();
        for e in &model.experts {
            let embed = next();
            let mut layers = Vec::new();
            for layer in &e.layers {
                let lv = |p: &super::params::Linear, next: &mut dyn FnMut() -> Var| LinVars {
                    w: next(),
                    lora: p.lora.as_ref().map(|l| (next(), next(), l.scale())),
                };
                let attn_norm = next();
                let wq = lv(&layer.wq, &mut next);
                let wk = lv(&layer.wk, &mut next);
                let wv = lv(&layer.wv, &mut next);
                let wo = lv(&layer.wo, &mut next);
                let ffn_norm = next();
                let w_gate = lv(&layer.w_gate, &mut next);
                let w_up = lv(&layer.w_up, &mut next);
                let w_down = lv(&layer.w_down, &mut next);
                layers.push(LayerVars {
                    attn_norm,
                    wq,
                    wk,
                    wv,
                    wo,
                    ffn_norm,
                    w_gate,
                    w_up,
                    w_down,
                });
            }
            let final_norm = next();
            let unembed = next();
            experts.push(ExpertVars {
                embed,
                layers,
                final_norm,
                unembed,
            });
        }
        Self { vars, infos, experts }
    }
}

fn linear(g: &mut Graph, x: Var, p: &LinVars) -> Result<Var, ModelError> {
    let mut y = g.matmul(x, p.w)?;
    if let Some((a, b, s)) = p.lora {
        let t = g.matmul(x, a)?;
        let t = g.matmul(t, b)?;
        let t = g.scale(t, s)?;
        y = g.add(y, t)?;
    }
    Ok(y)
}

/// Per-expert logits: `(expert, logits var, sequence rows)`.
pub struct SeqLogits {
    pub parts: Vec<(usize, Var, Vec<usize>)>,
}

/// Record the full forward pass on `g`.
pub fn build_forward(
    model: &Model,
    g: &mut Graph,
    pv: &ParamVars,
    tokens: &[SeqToken],
    mask: AttnMask,
) -> Result<SeqLogits, ModelError> {
    let c = &model.config;
    let n = tokens.len();
    let layout = c.layout();
    let ne = model.experts.len();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); ne];
    for (i, t) in tokens.iter().enumerate() {
        if !layout.accepts(t.tag, t.id) {
            return Err(ModelError::Vocab {
                token: t.id,
                expert: format!("tag {}", t.tag),
            });
        }
        rows[model.expert_index(t.tag)].push(i);
    }
    let active: Vec<usize> = (0..ne).filter(|&e| !rows[e].is_empty()).collect();
    let mut xs: Vec<Option<Var>> = vec![None; ne];
    for &e in &active {
        let ex = &model.experts[e];
        let mut local = Vec::with_capacity(rows[e].len());
        for &i in &rows[e] {
            let id = tokens[i].id;
            local.push(ex.input.local(id).ok_or_else(|| ModelError::Vocab {
                token: id,
                expert: ex.name.clone(),
            })?);
        }
        xs[e] = Some(g.gather_rows(pv.experts[e].embed, &local)?);
    }
    let shape = AttnShape {
        n_heads: c.n_heads,
        n_kv_heads: c.n_kv_heads,
        d_head: c.d_head,
    };
    for li in 0..c.n_layers {
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for &e in &active {
            let lv = &pv.experts[e].layers[li];
            let x = xs[e].unwrap();
            let h = g.rmsnorm(x, lv.attn_norm)?;
            let q = linear(g, h, &lv.wq)?;
            let k = linear(g, h, &lv.wk)?;
            let v = linear(g, h, &lv.wv)?;
            let theta = model.experts[e].rope_theta;
            let q = g.rope(q, &rows[e], theta, c.d_head)?;
            let k = g.rope(k, &rows[e], theta, c.d_head)?;
            qs.push((q, rows[e].clone()));
            ks.push((k, rows[e].clone()));
            vs.push((v, rows[e].clone()));
        }
        let (q, k, v) = if active.len() == 1 {
            (qs[0].0, ks[0].0, vs[0].0)
        } else {
            (g.merge_rows(&qs, n)?, g.merge_rows(&ks, n)?, g.merge_rows(&vs, n)?)
        };
        let att = g.attention(q, k, v, shape, mask.clone())?;
        for &e in &active {
            let lv = &pv.experts[e].layers[li];
            let a = if active.len() == 1 { att } else { g.gather_rows(att, &rows[e])? };
            let o = linear(g, a, &lv.wo)?;
            let x = g.add(xs[e].unwrap(), o)?;
            let h = g.rmsnorm(x, lv.ffn_norm)?;
            let gate = linear(g, h, &lv.w_gate)?;
            let up = linear(g, h, &lv.w_up)?;
            let s = g.swiglu(gate, up)?;
            let d = linear(g, s, &lv.w_down)?;
            xs[e] = Some(g.add(x, d)?);
        }
    }
    let mut parts = Vec::new();
    for &e in &active {
        let ev = &pv.experts[e];
        let h = g.rmsnorm(xs[e].unwrap(), ev.final_norm)?;
        let logits = g.matmul(h, ev.unembed)?;
        parts.push((e, logits, rows[e].clone()));
    }
    Ok(SeqLogits { parts })
}

/// Logits for every position, each over its routed expert's output vocabulary.
pub fn forward_sequence(model: &Model, tokens: &[SeqToken], horizon: Option<usize>) -> Result<Vec<Vec<Float>>, ModelError> {
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let pv = ParamVars::register(model, &mut g, &|_| false);
    let out = build_forward(model, &mut g, &pv, tokens, history_mask(tokens, horizon))?;
    let mut logits = vec![Vec::new(); tokens.len()];
    for (_, v, rows) in &out.parts {
        let t: &Tensor = g.value(*v);
        for (i, &r) in rows.iter().enumerate() {
            logits[r] = t.row(i).to_vec();
        }
    }
    Ok(logits)
}

/// Mean next-token loss over positions with a target, recorded on a fresh graph.
pub struct SeqLoss {
    pub graph: Graph,
    pub loss: Var,
    pub params: ParamVars,
    pub n_targets: usize,
}

/// `targets[i]` is the global id that position `i` should predict.
pub fn sequence_loss(
    model: &Model,
    tokens: &[SeqToken],
    targets: &[Option<usize>],
    horizon: Option<usize>,
    trainable: &dyn Fn(&ParamInfo) -> bool,
) -> Result<SeqLoss, ModelError> {
    if targets.len() != tokens.len() {
        return Err(ModelError::Structural(format!(
            "{} targets for {} tokens",
            targets.len(),
            tokens.len()
        )));
    }
    let mut g = Graph::new();
    let pv = ParamVars::register(model, &mut g, trainable);
    let n_targets = targets.iter().filter(|t| t.is_some()).count();
    if tokens.is_empty() || n_targets == 0 {
        let loss = g.constant(Tensor::scalar(0.0));
        return Ok(SeqLoss {
            graph: g,
            loss,
            params: pv,
            n_targets,
        });
    }
    let out = build_forward(model, &mut g, &pv, tokens, history_mask(tokens, horizon))?;
    let mut total: Option<Var> = None;
    for (e, v, rows) in &out.parts {
        let ex = &model.experts[*e];
        let mut local = Vec::with_capacity(rows.len());
        let mut any = false;
        for &r in rows {
            local.push(match targets[r] {
                Some(id) => {
                    any = true;
                    Some(ex.output.local(id).ok_or_else(|| ModelError::Vocab {
                        token: id,
                        expert: format!("{} output", ex.name),
                    })?)
                }
                None => None,
            });
        }
        if !any {
            continue;
        }
        let ce = g.cross_entropy_sum(*v, &local)?;
        total = Some(match total {
            None => ce,
            Some(t) => g.add(t, ce)?,
        });
    }
    let loss = g.scale(total.expect("at least one target"), 1.0 / n_targets as Float)?;
    Ok(SeqLoss {
        graph: g,
        loss,
        params: pv,
        n_targets,
    })
}
