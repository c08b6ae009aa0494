//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Float, Tensor};

pub const DEFAULT_EPS: Float = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: Float,
    pub checked: usize,
    /// `(tensor index, flat offset, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, Float, Float)>,
}

/// Compare `analytic` against `(f(θ+ε) − f(θ−ε)) / 2ε` on a random subsample of
/// at least `samples` coordinates (all of them when fewer exist). Relative error
/// uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    eps: Float,
    samples: usize,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> Float,
{
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if samples >= total {
        (0..total).collect()
    } else {
        let mut v = sample(&mut rng, total, samples).into_vec();
        v.sort_unstable();
        v
    };
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for flat in picks {
        let (ti, off) = locate(params, flat);
        let orig = work[ti].data()[off];
        work[ti].data_mut()[off] = orig + eps;
        let plus = f(&work);
        work[ti].data_mut()[off] = orig - eps;
        let minus = f(&work);
        work[ti].data_mut()[off] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[ti].data()[off];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some((ti, off, a, numeric));
            }
        }
    }
    report
}

fn locate(params: &[Tensor], mut flat: usize) -> (usize, usize) {
    for (i, p) in params.iter().enumerate() {
        if flat < p.len() {
            return (i, flat);
        }
        flat -= p.len();
    }
    unreachable!("coordinate beyond parameter set")
}
