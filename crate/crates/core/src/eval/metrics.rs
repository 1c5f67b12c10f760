use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which label value counts as positive for precision and recall.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveClass {
    /// `y = 1`, treatment continues.
    #[default]
    Continuation,
    /// `y = 0`, the patient withdraws.
    Withdrawal,
}

impl PositiveClass {
    fn label(self) -> bool {
        matches!(self, PositiveClass::Continuation)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// Predicts continuation when `prob >= threshold`.
    pub fn tally(probs: &[f64], labels: &[f64], threshold: f64, positive: PositiveClass) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "classification inputs",
                expected: labels.len(),
                actual: probs.len(),
            });
        }
        if probs.is_empty() {
            return Err(Error::InvalidArgument("no predictions to score".into()));
        }
        let mut c = Confusion::default();
        for (&p, &y) in probs.iter().zip(labels) {
            if y != 0.0 && y != 1.0 {
                return Err(Error::InvalidArgument(format!("label {y} is not binary")));
            }
            let pred_pos = (p >= threshold) == positive.label();
            let true_pos = (y == 1.0) == positive.label();
            match (pred_pos, true_pos) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Rates in `[0, 1]`. An undefined precision or recall (zero denominator)
/// is reported as 0 with its flag set; F1 is then 0 as well.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

impl From<Confusion> for ClassificationMetrics {
    fn from(c: Confusion) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
        let (precision, precision_undefined) = ratio(c.tp, c.tp + c.fp);
        let (recall, recall_undefined) = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
            precision,
            recall,
            f1,
            precision_undefined,
            recall_undefined,
        }
    }
}

pub fn classification_metrics(
    probs: &[f64],
    labels: &[f64],
    threshold: f64,
    positive: PositiveClass,
) -> Result<ClassificationMetrics> {
    Ok(Confusion::tally(probs, labels, threshold, positive)?.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rmse {
    /// Pooled over every dim of every masked row.
    pub aggregate: f64,
    pub per_dim: Vec<f64>,
    pub rows: usize,
}

/// RMSE over the rows where `mask` is true; inputs should be in raw units.
pub fn rmse(pred: &Array2<f64>, target: &Array2<f64>, mask: &[bool]) -> Result<Rmse> {
    if pred.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            context: "rmse shapes",
            expected: target.len(),
            actual: pred.len(),
        });
    }
    if mask.len() != pred.nrows() {
        return Err(Error::DimensionMismatch {
            context: "rmse mask",
            expected: pred.nrows(),
            actual: mask.len(),
        });
    }
    let rows = mask.iter().filter(|m| **m).count();
    if rows == 0 {
        return Err(Error::InvalidArgument("rmse over an empty mask".into()));
    }
    let d = pred.ncols();
    let mut per_dim = vec![0.0; d];
    for r in (0..pred.nrows()).filter(|&r| mask[r]) {
        for (k, acc) in per_dim.iter_mut().enumerate() {
            *acc += (pred[[r, k]] - target[[r, k]]).powi(2);
        }
    }
    let aggregate = (per_dim.iter().sum::<f64>() / (rows * d) as f64).sqrt();
    for v in &mut per_dim {
        *v = (*v / rows as f64).sqrt();
    }
    Ok(Rmse {
        aggregate,
        per_dim,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let m = classification_metrics(&[0.9, 0.1, 0.7], &[1.0, 0.0, 1.0], 0.5, PositiveClass::Continuation).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn confusion_fixture() {
        // TP, TP, FP, FN, TN
        let probs = [0.9, 0.6, 0.8, 0.2, 0.1];
        let labels = [1.0, 1.0, 0.0, 1.0, 0.0];
        let c = Confusion::tally(&probs, &labels, 0.5, PositiveClass::Continuation).unwrap();
        assert_eq!(c, Confusion { tp: 2, fp: 1, fn_: 1, tn: 1 });
        let m = ClassificationMetrics::from(c);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.accuracy - 0.6).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn withdrawal_as_positive_swaps_roles() {
        let probs = [0.9, 0.6, 0.8, 0.2, 0.1];
        let labels = [1.0, 1.0, 0.0, 1.0, 0.0];
        let c = Confusion::tally(&probs, &labels, 0.5, PositiveClass::Withdrawal).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 1, fn_: 1, tn: 2 });
    }

    #[test]
    fn undefined_precision_is_flagged() {
        let m = classification_metrics(&[0.1, 0.2], &[1.0, 0.0], 0.5, PositiveClass::Continuation).unwrap();
        assert!(m.precision_undefined && !m.recall_undefined);
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.0, 0.0, 0.0, 0.5));
    }

    #[test]
    fn classification_errors() {
        assert!(classification_metrics(&[], &[], 0.5, PositiveClass::Continuation).is_err());
        assert!(classification_metrics(&[0.5], &[0.5], 0.5, PositiveClass::Continuation).is_err());
        assert!(classification_metrics(&[0.5, 0.1], &[1.0], 0.5, PositiveClass::Continuation).is_err());
    }

    #[test]
    fn rmse_cases() {
        let t = Array2::from_shape_vec((2, 1), vec![0.0, 10.0]).unwrap();
        assert_eq!(rmse(&t, &t, &[true, true]).unwrap().aggregate, 0.0);
        let c = Array2::from_elem((2, 1), 5.0);
        assert_eq!(rmse(&c, &t, &[true, true]).unwrap().aggregate, 5.0);
        assert!(rmse(&c, &t, &[false, false]).is_err());
        let pred = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 2.0, 99.0, 99.0]).unwrap();
        let r = rmse(&pred, &Array2::zeros((3, 2)), &[true, true, false]).unwrap();
        assert_eq!(r.rows, 2);
        assert!((r.per_dim[0] - (0.5f64).sqrt()).abs() < 1e-15);
        assert!((r.per_dim[1] - (2.0f64).sqrt()).abs() < 1e-15);
        assert!((r.aggregate - (5.0f64 / 4.0).sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn f1_identity_and_rates(
            pairs in prop::collection::vec((0.0f64..1.0, prop::bool::ANY), 1..60),
            threshold in 0.0f64..1.0,
        ) {
            let probs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<f64> = pairs.iter().map(|p| if p.1 { 1.0 } else { 0.0 }).collect();
            let m = classification_metrics(&probs, &labels, threshold, PositiveClass::Continuation).unwrap();
            for v in [m.accuracy, m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if m.precision + m.recall > 0.0 {
                prop_assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-12);
            }
        }

        #[test]
        fn order_invariant(
            pairs in prop::collection::vec((0.0f64..1.0, prop::bool::ANY, -5.0f64..5.0), 1..40),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..pairs.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let probs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<f64> = pairs.iter().map(|p| if p.1 { 1.0 } else { 0.0 }).collect();
            let a = Confusion::tally(&probs, &labels, 0.5, PositiveClass::Continuation).unwrap();
            let pp: Vec<f64> = perm.iter().map(|&i| probs[i]).collect();
            let pl: Vec<f64> = perm.iter().map(|&i| labels[i]).collect();
            prop_assert_eq!(a, Confusion::tally(&pp, &pl, 0.5, PositiveClass::Continuation).unwrap());

            let pred = Array2::from_shape_fn((pairs.len(), 1), |(r, _)| pairs[r].2);
            let target = Array2::zeros((pairs.len(), 1));
            let shuffled = Array2::from_shape_fn((pairs.len(), 1), |(r, _)| pairs[perm[r]].2);
            let mask = vec![true; pairs.len()];
            let x = rmse(&pred, &target, &mask).unwrap().aggregate;
            let y = rmse(&shuffled, &target, &mask).unwrap().aggregate;
            prop_assert!((x - y).abs() < 1e-12);
        }

        #[test]
        fn rmse_scales_with_units(
            vals in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..30),
        ) {
            let pred = Array2::from_shape_fn((vals.len(), 1), |(r, _)| vals[r].0);
            let target = Array2::from_shape_fn((vals.len(), 1), |(r, _)| vals[r].1);
            let mask = vec![true; vals.len()];
            let a = rmse(&pred, &target, &mask).unwrap().aggregate;
            let b = rmse(&(&pred * 2.0), &(&target * 2.0), &mask).unwrap().aggregate;
            prop_assert!((b - 2.0 * a).abs() < 1e-9);
        }
    }
}
