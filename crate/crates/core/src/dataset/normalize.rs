use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::{Cohort, PatientRecord, NUM_VISITS, SCORE_DIM, STATIC_DIM};
use crate::error::{Error, Result};

/// Floor applied to every fitted standard deviation.
pub const STD_EPSILON: f64 = 1e-6;

/// Per-dimension z-score statistics for the static and score features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub static_mean: Vec<f64>,
    pub static_std: Vec<f64>,
    pub score_mean: Vec<f64>,
    pub score_std: Vec<f64>,
    pub epsilon: f64,
}

/// Fits population statistics on the training records, observed visits only.
pub fn fit_normalization(cohort: &Cohort, train_ids: &[String]) -> Result<NormalizationStats> {
    let train = cohort.select(train_ids);
    if train.is_empty() {
        return Err(Error::InvalidArgument("normalization needs at least one training record".into()));
    }
    let statics: Vec<Vec<f64>> = (0..STATIC_DIM)
        .map(|k| train.iter().map(|r| r.s[k]).collect())
        .collect();
    let scores: Vec<Vec<f64>> = (0..SCORE_DIM)
        .map(|d| {
            train
                .iter()
                .flat_map(|r| (0..NUM_VISITS).filter(|&t| r.mask[t]).map(move |t| r.x[[t, d]]))
                .collect()
        })
        .collect();

    let (static_mean, static_std) = column_stats(&statics, &cohort.feature_names.statics);
    let (score_mean, score_std) = column_stats(&scores, &cohort.feature_names.scores);
    Ok(NormalizationStats {
        static_mean,
        static_std,
        score_mean,
        score_std,
        epsilon: STD_EPSILON,
    })
}

fn column_stats(columns: &[Vec<f64>], names: &[String]) -> (Vec<f64>, Vec<f64>) {
    let mut means = Vec::with_capacity(columns.len());
    let mut stds = Vec::with_capacity(columns.len());
    for (col, name) in columns.iter().zip(names) {
        let n = col.len().max(1) as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < STD_EPSILON {
            log::warn!("feature `{name}` is constant on the training set; std clamped to {STD_EPSILON}");
        }
        means.push(mean);
        stds.push(std.max(STD_EPSILON));
    }
    (means, stds)
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

impl NormalizationStats {
    /// Identity statistics (zero mean, unit std) for the cohort layout.
    pub fn identity() -> Self {
        Self::identity_with_dims(STATIC_DIM, SCORE_DIM)
    }

    pub fn identity_with_dims(static_dim: usize, score_dim: usize) -> Self {
        Self {
            static_mean: vec![0.0; static_dim],
            static_std: vec![1.0; static_dim],
            score_mean: vec![0.0; score_dim],
            score_std: vec![1.0; score_dim],
            epsilon: STD_EPSILON,
        }
    }

    pub fn static_dim(&self) -> usize {
        self.static_mean.len()
    }

    pub fn score_dim(&self) -> usize {
        self.score_mean.len()
    }

    pub fn normalize_static(&self, s: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        check_len("static features", self.static_mean.len(), s.len())?;
        Ok(Array1::from_shape_fn(s.len(), |k| {
            (s[k] - self.static_mean[k]) / self.static_std[k]
        }))
    }

    pub fn denormalize_static(&self, s: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        check_len("static features", self.static_mean.len(), s.len())?;
        Ok(Array1::from_shape_fn(s.len(), |k| {
            s[k] * self.static_std[k] + self.static_mean[k]
        }))
    }

    /// Normalizes every row of an `n x 11` score matrix.
    pub fn normalize_scores(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        check_len("score dims", self.score_mean.len(), x.ncols())?;
        Ok(Array2::from_shape_fn(x.raw_dim(), |(r, d)| {
            (x[[r, d]] - self.score_mean[d]) / self.score_std[d]
        }))
    }

    pub fn denormalize_scores(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        check_len("score dims", self.score_mean.len(), x.ncols())?;
        Ok(Array2::from_shape_fn(x.raw_dim(), |(r, d)| {
            x[[r, d]] * self.score_std[d] + self.score_mean[d]
        }))
    }

    /// Scales normalized standard deviations back to raw units.
    pub fn denormalize_score_std(&self, std: &Array2<f64>) -> Result<Array2<f64>> {
        check_len("score dims", self.score_mean.len(), std.ncols())?;
        Ok(Array2::from_shape_fn(std.raw_dim(), |(r, d)| std[[r, d]] * self.score_std[d]))
    }

    pub fn normalize(&self, record: &PatientRecord) -> Result<PatientRecord> {
        Ok(PatientRecord {
            s: self.normalize_static(ArrayView1::from(&record.s))?.to_vec(),
            x: self.normalize_scores(&record.x)?,
            ..record.clone()
        })
    }

    pub fn denormalize(&self, record: &PatientRecord) -> Result<PatientRecord> {
        Ok(PatientRecord {
            s: self.denormalize_static(ArrayView1::from(&record.s))?.to_vec(),
            x: self.denormalize_scores(&record.x)?,
            ..record.clone()
        })
    }
}
