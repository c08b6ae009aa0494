use crate::num::{Float, Tensor};

use super::config::{Schedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
    pub weight_decay: Float,
}

impl AdamW {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// First and second moments, one pair per trained tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Moments {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// Learning rate for 1-based `step`: linear warmup, then constant or cosine decay.
pub fn lr_at(c: &TrainConfig, step: u64) -> Float {
    let warm = c.warmup_steps();
    if step <= warm && warm > 0 {
        return c.lr * step as Float / warm as Float;
    }
    match c.schedule {
        Schedule::Constant => c.lr,
        Schedule::Cosine => {
            let span = c.steps.saturating_sub(warm).max(1) as Float;
            let t = ((step - warm) as Float / span).min(1.0);
            let floor = c.lr * c.min_lr;
            floor + (c.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI as Float * t).cos())
        }
    }
}

/// One decoupled-weight-decay Adam update. `step` is 1-based; `decay[i]` enables decay for tensor `i`.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[Tensor], moments: &mut Moments, decay: &[bool], step: u64, lr: Float, hp: &AdamW) {
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut moments.m[i], &mut moments.v[i]);
        adamw_update(p, &grads[i], m, v, decay[i], step, lr, hp);
    }
}

/// [`adamw_step`] for a single tensor.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(p: &mut Tensor, grad: &Tensor, m: &mut Tensor, v: &mut Tensor, decay: bool, step: u64, lr: Float, hp: &AdamW) {
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    let wd = if decay { hp.weight_decay } else { 0.0 };
    let g = grad.data();
    for (mj, gj) in m.data_mut().iter_mut().zip(g) {
        *mj = hp.beta1 * *mj + (1.0 - hp.beta1) * gj;
    }
    for (vj, gj) in v.data_mut().iter_mut().zip(g) {
        *vj = hp.beta2 * *vj + (1.0 - hp.beta2) * gj * gj;
    }
    for ((x, mj), vj) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
        let update = (mj / bc1) / ((vj / bc2).sqrt() + hp.eps);
        *x -= lr * (update + wd * *x);
    }
}
