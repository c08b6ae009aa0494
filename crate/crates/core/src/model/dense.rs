//! Plain single-expert decoder. Kept independent of the tape and the
//! streaming path so it can serve as their reference.

use super::config::ModelConfig;
use super::params::Expert;
use super::ModelError;
use crate::num::kernels::{matmul, rmsnorm, rope_apply, softmax_rows};
use crate::num::{Float, Tensor};

fn project(x: &Tensor, p: &super::params::Linear) -> Result<Tensor, ModelError> {
    let mut w = p.w.clone();
    if let Some(l) = &p.lora {
        w.add_assign(&l.delta());
    }
    Ok(matmul(x, &w)?)
}

/// Causal logits `[T × |output|]` over the expert's output vocabulary.
pub fn dense_oracle_forward(config: &ModelConfig, e: &Expert, tokens: &[usize]) -> Result<Tensor, ModelError> {
    let t = tokens.len();
    let d = config.d_model;
    if t == 0 {
        return Ok(Tensor::zeros(&[0, e.output.len()]));
    }
    let mut rows = Vec::with_capacity(t);
    for &id in tokens {
        rows.push(e.embed_row(id)?.to_vec());
    }
    let mut x = Tensor::from_rows(&rows)?;
    let (nh, nkv, dh) = (config.n_heads, config.n_kv_heads, config.d_head);
    let group = nh / nkv;
    for layer in &e.layers {
        let h = rmsnorm(&x, &layer.attn_norm)?;
        let q = project(&h, &layer.wq)?;
        let k = project(&h, &layer.wk)?;
        let v = project(&h, &layer.wv)?;
        let mut att = Tensor::zeros(&[t, nh * dh]);
        for head in 0..nh {
            let kvh = head / group;
            let take = |m: &Tensor, hh: usize, pos: usize| -> Result<Tensor, ModelError> {
                let row = m.row(pos)[hh * dh..(hh + 1) * dh].to_vec();
                Ok(rope_apply(&Tensor::new(vec![1, dh], row)?, pos, e.rope_theta)?)
            };
            let mut scores = Tensor::filled(&[t, t], Float::NEG_INFINITY);
            for i in 0..t {
                let qi = take(&q, head, i)?;
                for j in 0..=i {
                    let kj = take(&k, kvh, j)?;
                    let s: Float = qi.data().iter().zip(kj.data()).map(|(a, b)| a * b).sum();
                    scores.row_mut(i)[j] = s / (dh as Float).sqrt();
                }
            }
            let p = softmax_rows(&scores);
            for i in 0..t {
                for j in 0..=i {
                    let w = p.get2(i, j);
                    for c in 0..dh {
                        att.row_mut(i)[head * dh + c] += w * v.get2(j, kvh * dh + c);
                    }
                }
            }
        }
        let o = project(&att, &layer.wo)?;
        x.add_assign(&o);
        let h2 = rmsnorm(&x, &layer.ffn_norm)?;
        let gate = project(&h2, &layer.w_gate)?;
        let up = project(&h2, &layer.w_up)?;
        let s: Vec<Float> = gate
            .data()
            .iter()
            .zip(up.data())
            .map(|(&g, &u)| g / (1.0 + (-g).exp()) * u)
            .collect();
        let s = Tensor::new(vec![t, config.d_ff], s)?;
        let down = project(&s, &layer.w_down)?;
        x.add_assign(&down);
    }
    debug_assert_eq!(x.cols(), d);
    let hf = rmsnorm(&x, &e.final_norm)?;
    Ok(matmul(&hf, &e.unembed)?)
}
