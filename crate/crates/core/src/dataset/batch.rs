use ndarray::Array2;

use super::{NormalizationStats, PatientRecord, NUM_INTERVALS, NUM_VISITS, SCORE_DIM, STATIC_DIM};
use crate::error::{Error, Result};

/// A batch of normalized sequences laid out time-major for the models.
///
/// `x[t]` is `B x 11`; unobserved cells are zero and `obs[[b, t]]` is 0.
/// Labels and actions are real so Mixup can soften them.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub ids: Vec<String>,
    pub s: Array2<f64>,
    pub x: Vec<Array2<f64>>,
    pub obs: Array2<f64>,
    pub a: Array2<f64>,
    pub y: Array2<f64>,
}

impl SequenceBatch {
    pub fn from_records(
        records: &[&PatientRecord],
        stats: &NormalizationStats,
        use_post_withdrawal_scores: bool,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let n = records.len();
        let mut s = Array2::zeros((n, STATIC_DIM));
        let mut x = vec![Array2::zeros((n, SCORE_DIM)); NUM_VISITS];
        let mut obs = Array2::zeros((n, NUM_VISITS));
        let mut a = Array2::zeros((n, NUM_INTERVALS));
        let mut y = Array2::zeros((n, NUM_INTERVALS));
        for (b, r) in records.iter().enumerate() {
            let z = stats.normalize(r)?;
            for k in 0..STATIC_DIM {
                s[[b, k]] = z.s[k];
            }
            let mask = r.usable_mask(use_post_withdrawal_scores);
            for t in 0..NUM_VISITS {
                if mask[t] {
                    obs[[b, t]] = 1.0;
                    x[t].row_mut(b).assign(&z.x.row(t));
                }
            }
            for t in 0..NUM_INTERVALS {
                y[[b, t]] = f64::from(r.y[t]);
                a[[b, t]] = f64::from(r.y[t]);
            }
        }
        Ok(Self {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            s,
            x,
            obs,
            a,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rows `idx` as a new batch.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            s: self.s.select(ndarray::Axis(0), idx),
            x: self.x.iter().map(|m| m.select(ndarray::Axis(0), idx)).collect(),
            obs: self.obs.select(ndarray::Axis(0), idx),
            a: self.a.select(ndarray::Axis(0), idx),
            y: self.y.select(ndarray::Axis(0), idx),
        }
    }

    /// Splits into consecutive chunks of at most `size` rows.
    pub fn chunks(&self, size: usize) -> Vec<Self> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size.max(1)).map(|c| self.select(c)).collect()
    }

    /// Column `t` of `obs` as a `B x 1` matrix.
    pub fn obs_column(&self, t: usize) -> Array2<f64> {
        self.obs.column(t).to_owned().insert_axis(ndarray::Axis(1))
    }

    pub fn action_column(&self, t: usize) -> Array2<f64> {
        self.a.column(t).to_owned().insert_axis(ndarray::Axis(1))
    }

    pub fn label_column(&self, t: usize) -> Array2<f64> {
        self.y.column(t).to_owned().insert_axis(ndarray::Axis(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::record;

    #[test]
    fn layout_and_masking() {
        let mut a = record("a", [1, 1, 0, 0, 0]);
        a.mask[3] = false;
        a.x.row_mut(3).fill(f64::NAN);
        let b = record("b", [1; 5]);
        let stats = NormalizationStats::identity();
        let batch = SequenceBatch::from_records(&[&a, &b], &stats, true).unwrap();
        assert_eq!(batch.s.dim(), (2, 14));
        assert_eq!(batch.x.len(), 6);
        assert_eq!(batch.x[3].row(0).sum(), 0.0);
        assert_eq!(batch.obs.row(0).to_vec(), vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        assert_eq!(batch.y.row(0).to_vec(), vec![1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(batch.a, batch.y);
        assert_eq!(batch.x[2][[1, 4]], b.x[[2, 4]]);

        let hidden = SequenceBatch::from_records(&[&a], &stats, false).unwrap();
        assert_eq!(hidden.obs.row(0).to_vec(), vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn chunks_cover_batch() {
        let recs: Vec<_> = (0..5).map(|i| record(&format!("r{i}"), [1; 5])).collect();
        let refs: Vec<_> = recs.iter().collect();
        let batch = SequenceBatch::from_records(&refs, &NormalizationStats::identity(), true).unwrap();
        let parts = batch.chunks(2);
        assert_eq!(parts.iter().map(SequenceBatch::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        assert_eq!(parts[2].ids, vec!["r4".to_string()]);
    }
}
