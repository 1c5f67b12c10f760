use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::SequenceBatch;
use crate::error::{Error, Result};

pub const DEFAULT_MIXUP_ALPHA: f64 = 0.2;

/// Serializes a disabled Mixup (`None`) as `0`, since TOML has no null.
pub(crate) mod alpha_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(alpha: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(alpha.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = Option::<f64>::deserialize(d)?;
        Ok(v.filter(|&a| a != 0.0))
    }
}

pub fn mix_pair(a: f64, b: f64, lambda: f64) -> f64 {
    lambda * a + (1.0 - lambda) * b
}

/// Mixes every sequence with a random partner, `lambda ~ Beta(alpha, alpha)`.
pub fn mixup_batch<R: Rng + ?Sized>(batch: &SequenceBatch, alpha: f64, rng: &mut R) -> Result<SequenceBatch> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("mixup alpha must be positive, got {alpha}")));
    }
    if batch.len() < 2 {
        log::warn!("mixup skipped: batch of {} sequence(s)", batch.len());
        return Ok(batch.clone());
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let lambdas: Vec<f64> = (0..batch.len()).map(|_| beta.sample(rng)).collect();
    let mut partners: Vec<usize> = (0..batch.len()).collect();
    partners.shuffle(rng);
    mixup_with(batch, &lambdas, &partners)
}

/// Row `i` becomes `lambdas[i] * row i + (1 - lambdas[i]) * row partners[i]`.
///
/// A visit counts as observed only if both parents observed it, unless one
/// parent carries zero weight.
pub fn mixup_with(batch: &SequenceBatch, lambdas: &[f64], partners: &[usize]) -> Result<SequenceBatch> {
    let n = batch.len();
    if lambdas.len() != n || partners.len() != n {
        return Err(Error::DimensionMismatch {
            context: "mixup lambdas/partners",
            expected: n,
            actual: lambdas.len().min(partners.len()),
        });
    }
    if let Some(&p) = partners.iter().find(|&&p| p >= n) {
        return Err(Error::InvalidArgument(format!("mixup partner {p} out of range")));
    }
    if lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::InvalidArgument("mixup lambda outside [0, 1]".into()));
    }

    let mut out = batch.clone();
    let mix_rows = |dst: &mut ndarray::Array2<f64>, src: &ndarray::Array2<f64>| {
        for i in 0..n {
            let (l, j) = (lambdas[i], partners[i]);
            for c in 0..src.ncols() {
                dst[[i, c]] = mix_pair(src[[i, c]], src[[j, c]], l);
            }
        }
    };
    mix_rows(&mut out.s, &batch.s);
    mix_rows(&mut out.a, &batch.a);
    mix_rows(&mut out.y, &batch.y);
    for (dst, src) in out.x.iter_mut().zip(&batch.x) {
        mix_rows(dst, src);
    }
    for i in 0..n {
        let (l, j) = (lambdas[i], partners[i]);
        for t in 0..batch.obs.ncols() {
            out.obs[[i, t]] = if l == 1.0 {
                batch.obs[[i, t]]
            } else if l == 0.0 {
                batch.obs[[j, t]]
            } else {
                batch.obs[[i, t]] * batch.obs[[j, t]]
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::record;
    use crate::dataset::NormalizationStats;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch() -> SequenceBatch {
        let mut a = record("a", [1; 5]);
        let mut b = record("b", [1, 1, 0, 0, 0]);
        a.s[0] = 0.0;
        b.s[0] = 2.0;
        b.mask[4] = false;
        b.x.row_mut(4).fill(f64::NAN);
        a.x.mapv_inplace(|v| v * 0.5);
        SequenceBatch::from_records(&[&a, &b], &NormalizationStats::identity(), true).unwrap()
    }

    #[test]
    fn lambda_one_returns_first_sample() {
        let b = batch();
        let out = mixup_with(&b, &[1.0, 1.0], &[1, 0]).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn half_mix_of_scalars() {
        assert_eq!(mix_pair(0.0, 2.0, 0.5), 1.0);
        let out = mixup_with(&batch(), &[0.5, 0.5], &[1, 0]).unwrap();
        assert_eq!(out.s[[0, 0]], 1.0);
        assert_eq!(out.y[[0, 2]], 0.5);
        assert_eq!(out.obs[[0, 4]], 0.0);
        assert_eq!(out.obs[[0, 3]], 1.0);
    }

    #[test]
    fn lambda_zero_takes_partner_mask() {
        let b = batch();
        let out = mixup_with(&b, &[0.0, 1.0], &[1, 0]).unwrap();
        assert_eq!(out.obs.row(0), b.obs.row(1));
        assert_eq!(out.x[2].row(0), b.x[2].row(1));
    }

    #[test]
    fn singleton_batch_unchanged() {
        let b = batch().select(&[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(mixup_batch(&b, 0.2, &mut rng).unwrap(), b);
    }

    #[test]
    fn beta_lambda_mean_is_one_half() {
        let beta = Beta::new(DEFAULT_MIXUP_ALPHA, DEFAULT_MIXUP_ALPHA).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mean = (0..n).map(|_| beta.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    proptest! {
        #[test]
        fn outputs_lie_between_parents(seed in any::<u64>()) {
            let b = batch();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = mixup_batch(&b, 0.2, &mut rng).unwrap();
            // With two rows every partner is row 0 or row 1, so each output
            // value lies within the per-column range of the batch.
            let within = |o: &ndarray::Array2<f64>, src: &ndarray::Array2<f64>| {
                o.indexed_iter().all(|((_, c), v)| {
                    let (lo, hi) = (src[[0, c]].min(src[[1, c]]), src[[0, c]].max(src[[1, c]]));
                    *v >= lo - 1e-12 && *v <= hi + 1e-12
                })
            };
            prop_assert!(within(&out.s, &b.s));
            prop_assert!(within(&out.y, &b.y));
            for t in 0..6 {
                prop_assert!(within(&out.x[t], &b.x[t]));
            }
        }
    }
}
