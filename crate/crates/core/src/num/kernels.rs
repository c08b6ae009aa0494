//! Forward kernels shared by the tape and the cached decoding path.

use super::tensor::check_finite;
use super::{Float, NumError, Result, Tensor};

pub const RMSNORM_EPS: Float = 1e-6;

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(NumError::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(NumError::Shape {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    check_finite("matmul", &out)?;
    Tensor::new(vec![m, n], out)
}

/// `out += a[m×k] · b[k×n]` on raw slices.
pub fn matmul_into(a: &[Float], b: &[Float], out: &mut [Float], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt_into(a: &[Float], b: &[Float], out: &mut [Float], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn_into(a: &[Float], b: &[Float], out: &mut [Float], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[Float], b: &[Float]) -> Float {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    if cols > 0 {
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
    }
    out
}

pub fn softmax_in_place(row: &mut [Float]) {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `y = x / sqrt(mean(x²) + ε) ⊙ gain` over the last dimension.
pub fn rmsnorm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if gain.len() != d || d == 0 {
        return Err(NumError::Shape {
            op: "rmsnorm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let inv = inv_rms(row);
        for (v, g) in row.iter_mut().zip(gain.data()) {
            *v *= inv * g;
        }
    }
    check_finite("rmsnorm", out.data())?;
    Ok(out)
}

#[inline]
pub fn inv_rms(row: &[Float]) -> Float {
    let ms = row.iter().map(|v| v * v).sum::<Float>() / row.len() as Float;
    1.0 / (ms + RMSNORM_EPS).sqrt()
}

/// Rotate consecutive pairs of every head in `row` (length `heads·d_head`)
/// by `position · theta^(−2i/d_head)`. `sign = -1` applies the inverse rotation.
pub fn rope_row(row: &mut [Float], d_head: usize, position: Float, theta: Float, sign: Float) {
    let half = d_head / 2;
    for head in row.chunks_mut(d_head) {
        for i in 0..half {
            let freq = theta.powf(-(2.0 * i as Float) / d_head as Float);
            let angle = position * freq;
            let (s, c) = (sign * angle).sin_cos();
            let x0 = head[2 * i];
            let x1 = head[2 * i + 1];
            head[2 * i] = x0 * c - x1 * s;
            head[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

/// Rotary embedding of `x[heads×d_head]` at one position.
pub fn rope_apply(x: &Tensor, position: usize, theta: Float) -> Result<Tensor> {
    let d_head = x.cols();
    if d_head % 2 != 0 {
        return Err(NumError::Config(format!("rope needs an even head dimension, got {d_head}")));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d_head) {
        rope_row(row, d_head, position as Float, theta, 1.0);
    }
    Ok(out)
}

#[inline]
pub fn silu(x: Float) -> Float {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn sigmoid(x: Float) -> Float {
    1.0 / (1.0 + (-x).exp())
}

/// Result of a masked mean cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub loss: Float,
    /// Set when no position was masked in; the loss is then defined as 0.
    pub empty_mask: bool,
}

/// Mean over masked-in rows of `−log softmax(logits)[target]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<CrossEntropy> {
    let (t, v) = require_matrix("cross_entropy", logits)?;
    if targets.len() != t || mask.len() != t {
        return Err(NumError::Shape {
            op: "cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![targets.len(), mask.len()],
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&target, &on)) in targets.iter().zip(mask).enumerate() {
        if !on {
            continue;
        }
        if target >= v {
            return Err(NumError::Config(format!("target {target} outside vocab of {v}")));
        }
        total += nll_row(logits.row(i), target);
        count += 1;
    }
    if count == 0 {
        log::warn!("cross_entropy called with an empty mask; loss defined as 0");
        return Ok(CrossEntropy {
            loss: 0.0,
            empty_mask: true,
        });
    }
    Ok(CrossEntropy {
        loss: total / count as Float,
        empty_mask: false,
    })
}

/// `−log softmax(row)[target]` via log-sum-exp.
pub fn nll_row(row: &[Float], target: usize) -> Float {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<Float>().ln() + max;
    lse - row[target]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[Float]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_swap() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let swap = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(matmul(&a, &swap).unwrap(), m(&[&[2.0, 1.0], &[4.0, 3.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get2(i, k) * b.get2(k, j);
                }
                assert!((c.get2(i, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_identity_associativity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let ai = matmul(&a, &Tensor::identity(3)).unwrap();
        assert_eq!(matmul(&ai, &b).unwrap(), matmul(&a, &b).unwrap());
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let mut nt = vec![0.0; 15];
        matmul_nt_into(a.data(), b.data(), &mut nt, 3, 4, 5);
        let mut bt = Tensor::zeros(&[4, 5]);
        for i in 0..5 {
            for j in 0..4 {
                bt.data_mut()[j * 5 + i] = b.get2(i, j);
            }
        }
        let plain = matmul(&a, &bt).unwrap();
        for (x, y) in nt.iter().zip(plain.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut tn = vec![0.0; 4 * 4];
        matmul_tn_into(a.data(), a.data(), &mut tn, 3, 4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let s: Float = (0..3).map(|k| a.get2(k, i) * a.get2(k, j)).sum();
                assert!((tn[i * 4 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_uniform_shift_and_overflow() {
        let s = softmax_rows(&m(&[&[0.0, 0.0, 0.0, 0.0]]));
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let big = softmax_rows(&m(&[&[1000.0, 0.0]]));
        assert!((big.data()[0] - 1.0).abs() < 1e-15 && big.data()[1] >= 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[4, 7], 3.0, &mut rng);
        let shifted = Tensor::new(vec![4, 7], x.data().iter().map(|v| v + 17.25).collect()).unwrap();
        let (a, b) = (softmax_rows(&x), softmax_rows(&shifted));
        assert!(a.max_abs_diff(&b) <= 1e-12);
        for r in 0..4 {
            assert!((a.row(r).iter().sum::<Float>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rmsnorm_constant_and_scale_invariance() {
        let y = rmsnorm(&m(&[&[2.0, 2.0, 2.0, 2.0]]), &Tensor::filled(&[4], 1.0)).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Large activations keep the epsilon term below the comparison tolerance.
        let x = Tensor::randn(&[3, 8], 100.0, &mut rng);
        let g = Tensor::randn(&[8], 1.0, &mut rng);
        let a = rmsnorm(&x, &g).unwrap();
        let b = rmsnorm(&x.scaled(3.5), &g).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-9);
    }

    #[test]
    fn rmsnorm_matches_compensated_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[5, 16], 2.0, &mut rng);
        let g = Tensor::randn(&[16], 1.0, &mut rng);
        let y = rmsnorm(&x, &g).unwrap();
        for r in 0..5 {
            // Kahan-summed mean square, then the same formula.
            let (mut sum, mut comp) = (0.0 as Float, 0.0 as Float);
            for v in x.row(r) {
                let t = v * v - comp;
                let s = sum + t;
                comp = (s - sum) - t;
                sum = s;
            }
            let inv = 1.0 / (sum / 16.0 + RMSNORM_EPS).sqrt();
            for (j, v) in x.row(r).iter().enumerate() {
                assert!((y.get2(r, j) - v * inv * g.data()[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rope_zero_position_and_quarter_turn() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[2, 8], 1.0, &mut rng);
        assert_eq!(rope_apply(&x, 0, 10_000.0).unwrap(), x);
        // d_head = 2: the only frequency is theta^0 = 1, so the angle equals the position.
        let mut row = vec![0.3, -1.2];
        rope_row(&mut row, 2, std::f64::consts::FRAC_PI_2 as Float, 123.0, 1.0);
        assert!((row[0] - 1.2).abs() < 1e-12 && (row[1] - 0.3).abs() < 1e-12);
        assert!(rope_apply(&Tensor::zeros(&[1, 3]), 1, 10.0).is_err());
    }

    #[test]
    fn rope_relative_position_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 16], 1.0, &mut rng);
        for (p1, p2, shift) in [(3usize, 11usize, 5usize), (0, 7, 40), (20, 2, 13)] {
            let a = dot(
                rope_apply(&q, p1, 10_000.0).unwrap().data(),
                rope_apply(&k, p2, 10_000.0).unwrap().data(),
            );
            let b = dot(
                rope_apply(&q, p1 + shift, 10_000.0).unwrap().data(),
                rope_apply(&k, p2 + shift, 10_000.0).unwrap().data(),
            );
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let confident = m(&[&[60.0, 0.0, 0.0]]);
        let ce = cross_entropy(&confident, &[0], &[true]).unwrap();
        assert!(ce.loss < 1e-20 && !ce.empty_mask);
        let uniform = Tensor::zeros(&[3, 5]);
        let ce = cross_entropy(&uniform, &[0, 3, 4], &[true, true, false]).unwrap();
        assert!((ce.loss - (5.0 as Float).ln()).abs() < 1e-12);
        let ce = cross_entropy(&uniform, &[0, 3, 4], &[false; 3]).unwrap();
        assert_eq!(ce, CrossEntropy { loss: 0.0, empty_mask: true });
        assert!(cross_entropy(&uniform, &[0, 9, 4], &[true; 3]).is_err());
    }
}
