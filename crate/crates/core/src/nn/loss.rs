//! Distribution losses, both as plain functions over slices and as tape
//! builders producing per-element matrices.

use super::tape::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Probability clamp used by [`bce`].
pub const BCE_EPS: f64 = 1e-7;

/// `0.5 * ln(2 pi)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn check_dims(context: &'static str, expected: usize, slices: &[usize]) -> Result<()> {
    for &actual in slices {
        if actual != expected {
            return Err(Error::DimensionMismatch {
                context,
                expected,
                actual,
            });
        }
    }
    Ok(())
}

/// KL(N(mean1, std1) || N(mean2, std2)) summed over dimensions.
pub fn gaussian_kl_diag(mean1: &[f64], std1: &[f64], mean2: &[f64], std2: &[f64]) -> Result<f64> {
    check_dims(
        "gaussian_kl_diag",
        mean1.len(),
        &[std1.len(), mean2.len(), std2.len()],
    )?;
    let mut total = 0.0;
    for i in 0..mean1.len() {
        let (s1, s2) = (std1[i], std2[i]);
        if !(s1 > 0.0 && s2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "standard deviations must be positive, got {s1} and {s2}"
            )));
        }
        let d = mean1[i] - mean2[i];
        total += (s2 / s1).ln() + (s1 * s1 + d * d) / (2.0 * s2 * s2) - 0.5;
    }
    Ok(total)
}

/// Negative log density of `x` under N(mean, std), summed over dimensions.
pub fn gaussian_nll(x: &[f64], mean: &[f64], std: &[f64]) -> Result<f64> {
    check_dims("gaussian_nll", x.len(), &[mean.len(), std.len()])?;
    let mut total = 0.0;
    for i in 0..x.len() {
        let s = std[i];
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "standard deviation must be positive, got {s}"
            )));
        }
        let z = (x[i] - mean[i]) / s;
        total += HALF_LN_2PI + s.ln() + 0.5 * z * z;
    }
    Ok(total)
}

/// Binary cross-entropy with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
/// Soft labels `y` in `[0, 1]` are allowed.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Elementwise KL between two diagonal Gaussians on the tape.
pub fn kl_diag_tape(tape: &mut Tape, mean1: Var, std1: Var, mean2: Var, std2: Var) -> Var {
    let ln_s2 = tape.ln(std2);
    let ln_s1 = tape.ln(std1);
    let log_ratio = tape.sub(ln_s2, ln_s1);
    let var1 = tape.square(std1);
    let diff = tape.sub(mean1, mean2);
    let diff_sq = tape.square(diff);
    let num = tape.add(var1, diff_sq);
    let var2 = tape.square(std2);
    let den = tape.scale(var2, 2.0);
    let frac = tape.div(num, den);
    let total = tape.add(log_ratio, frac);
    tape.add_scalar(total, -0.5)
}

/// KL(N(mean, std) || N(0, I)) elementwise.
pub fn kl_standard_normal_tape(tape: &mut Tape, mean: Var, std: Var) -> Var {
    let ln_s = tape.ln(std);
    let var = tape.square(std);
    let m2 = tape.square(mean);
    let sum = tape.add(var, m2);
    let half = tape.scale(sum, 0.5);
    let t = tape.sub(half, ln_s);
    tape.add_scalar(t, -0.5)
}

/// Elementwise Gaussian negative log density of a constant target.
pub fn gaussian_nll_tape(tape: &mut Tape, target: &Matrix, mean: Var, std: Var) -> Var {
    let x = tape.leaf(target.clone());
    let diff = tape.sub(x, mean);
    let z = tape.div(diff, std);
    let z2 = tape.square(z);
    let half = tape.scale(z2, 0.5);
    let ln_s = tape.ln(std);
    let t = tape.add(half, ln_s);
    tape.add_scalar(t, HALF_LN_2PI)
}

/// Binary cross-entropy from logits: `softplus(l) - y * l`.
pub fn bce_logits_tape(tape: &mut Tape, logits: Var, target: &Matrix) -> Var {
    let sp = tape.softplus(logits);
    let yl = tape.mul_const(logits, target.clone());
    tape.sub(sp, yl)
}

/// Mean squared error normalized per dimension by the target variance,
/// averaged over dimensions and valid rows.
pub fn nmse(pred: &Matrix, target: &Matrix, valid: &[bool], variance: &[f64]) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            context: "nmse rows",
            expected: target.nrows(),
            actual: pred.nrows(),
        });
    }
    check_dims("nmse dims", pred.ncols(), &[variance.len()])?;
    check_dims("nmse mask", pred.nrows(), &[valid.len()])?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &ok) in valid.iter().enumerate() {
        if !ok {
            continue;
        }
        for d in 0..pred.ncols() {
            let e = pred[[r, d]] - target[[r, d]];
            total += e * e / variance[d];
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("nmse over an empty mask".into()));
    }
    Ok(total / (count * pred.ncols()) as f64)
}

/// Population variance per column over the valid rows, floored at `eps`.
pub fn column_variance(target: &Matrix, valid: &[bool], eps: f64) -> Vec<f64> {
    let cols = target.ncols();
    let rows: Vec<usize> = (0..target.nrows()).filter(|&r| valid[r]).collect();
    let n = rows.len().max(1) as f64;
    (0..cols)
        .map(|d| {
            let mean = rows.iter().map(|&r| target[[r, d]]).sum::<f64>() / n;
            let var = rows
                .iter()
                .map(|&r| (target[[r, d]] - mean).powi(2))
                .sum::<f64>()
                / n;
            var.max(eps)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::function::erf::erf;

    #[test]
    fn kl_closed_forms() {
        assert_eq!(gaussian_kl_diag(&[0.3], &[1.7], &[0.3], &[1.7]).unwrap(), 0.0);
        assert!((gaussian_kl_diag(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        let v = gaussian_kl_diag(&[0.0], &[2.0], &[0.0], &[1.0]).unwrap();
        assert!((v - (2.0 - 0.5 - 2f64.ln())).abs() < 1e-15);
        assert!((v - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn kl_errors() {
        assert!(matches!(
            gaussian_kl_diag(&[0.0, 1.0], &[1.0], &[0.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(gaussian_kl_diag(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn kl_nonnegative_over_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let d = rng.random_range(1..6);
            let m1: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let m2: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let s1: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..5.0)).collect();
            let s2: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..5.0)).collect();
            assert!(gaussian_kl_diag(&m1, &s1, &m2, &s2).unwrap() >= 0.0);
        }
    }

    #[test]
    fn nll_closed_forms() {
        let v = gaussian_nll(&[0.4], &[0.4], &[1.0]).unwrap();
        assert!((v - 0.91894).abs() < 1e-5);
        let w = gaussian_nll(&[1.4, -1.0], &[0.4, 0.0], &[1.0, 2.0]).unwrap();
        let base = gaussian_nll(&[0.4, 0.0], &[0.4, 0.0], &[1.0, 2.0]).unwrap();
        // One dim at mean + std, one at mean - std/2.
        assert!((w - base - 0.5 - 0.125).abs() < 1e-14);
    }

    #[test]
    fn nll_matches_erf_density_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cdf = |x: f64, m: f64, s: f64| 0.5 * (1.0 + erf((x - m) / (s * 2f64.sqrt())));
        for _ in 0..200 {
            let m = rng.random_range(-3.0..3.0);
            let s = rng.random_range(0.2..3.0);
            let x = m + s * rng.random_range(-2.5..2.5);
            let h = 1e-5 * s;
            let density = (cdf(x + h, m, s) - cdf(x - h, m, s)) / (2.0 * h);
            let nll = gaussian_nll(&[x], &[m], &[s]).unwrap();
            assert!(
                ((-nll).exp() - density).abs() < 1e-6 * density.max(1e-3),
                "x={x} m={m} s={s}"
            );
        }
    }

    #[test]
    fn bce_reference_values() {
        let ln2 = 2f64.ln();
        assert!((bce(0.5, 0.0) - ln2).abs() < 1e-15);
        assert!((bce(0.5, 1.0) - ln2).abs() < 1e-15);
        assert!((bce(0.5, 0.5) - ln2).abs() < 1e-15);
        assert!(bce(1.0, 1.0) < 1e-6);
        assert!(bce(0.0, 1.0).is_finite());
    }

    #[test]
    fn tape_losses_agree_with_plain_functions() {
        let mut tape = Tape::new();
        let m1 = tape.leaf(Matrix::from_shape_vec((1, 2), vec![0.3, -1.0]).unwrap());
        let s1 = tape.leaf(Matrix::from_shape_vec((1, 2), vec![0.7, 1.5]).unwrap());
        let m2 = tape.leaf(Matrix::from_shape_vec((1, 2), vec![0.0, 0.0]).unwrap());
        let s2 = tape.leaf(Matrix::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap());
        let kl = kl_diag_tape(&mut tape, m1, s1, m2, s2);
        let kl0 = kl_standard_normal_tape(&mut tape, m1, s1);
        let expected = gaussian_kl_diag(&[0.3, -1.0], &[0.7, 1.5], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((tape.value(kl).sum() - expected).abs() < 1e-14);
        assert!((tape.value(kl0).sum() - expected).abs() < 1e-14);

        let x = Matrix::from_shape_vec((1, 2), vec![0.1, 0.2]).unwrap();
        let nll = gaussian_nll_tape(&mut tape, &x, m1, s1);
        let expected = gaussian_nll(&[0.1, 0.2], &[0.3, -1.0], &[0.7, 1.5]).unwrap();
        assert!((tape.value(nll).sum() - expected).abs() < 1e-14);

        let logits = tape.leaf(Matrix::from_shape_vec((3, 1), vec![-2.0, 0.0, 1.5]).unwrap());
        let y = Matrix::from_shape_vec((3, 1), vec![0.0, 1.0, 0.3]).unwrap();
        let b = bce_logits_tape(&mut tape, logits, &y);
        for (r, &l) in [-2.0f64, 0.0, 1.5].iter().enumerate() {
            let p = 1.0 / (1.0 + (-l).exp());
            assert!((tape.value(b)[[r, 0]] - bce(p, y[[r, 0]])).abs() < 1e-12);
        }
    }

    #[test]
    fn nmse_of_mean_predictor_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let target = Matrix::from_shape_simple_fn((37, 4), || rng.random_range(-3.0..8.0));
        let valid = vec![true; 37];
        let var = column_variance(&target, &valid, 1e-12);
        let mean = target.mean_axis(ndarray::Axis(0)).unwrap();
        let pred = Matrix::from_shape_fn((37, 4), |(_, d)| mean[d]);
        assert!((nmse(&pred, &target, &valid, &var).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(nmse(&target, &target, &valid, &var).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(m1 in -10.0f64..10.0, m2 in -10.0f64..10.0,
                             s1 in 1e-3f64..10.0, s2 in 1e-3f64..10.0) {
            prop_assert!(gaussian_kl_diag(&[m1], &[s1], &[m2], &[s2]).unwrap() >= 0.0);
        }
    }
}
