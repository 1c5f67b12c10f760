//! Prediction outputs shared by both sequence models.

use ndarray::Array2;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::dataset::{NormalizationStats, SequenceBatch, NUM_INTERVALS, NUM_VISITS};
use crate::error::{Error, Result};

/// Default number of latent samples at evaluation time.
pub const DEFAULT_SAMPLES: usize = 100;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// How a step's prediction was conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Conditioned on the observed history up to this step.
    Filtered,
    /// Generated from the prior without further observations.
    PriorRollout,
    /// Fed back the model's own earlier outputs.
    Autoregressive,
}

/// Predicted score distribution for one visit, in raw units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStep {
    /// Zero-based visit index.
    pub visit: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `K x D` per-sample predictive means; empty for deterministic models.
    #[serde(skip)]
    pub samples: Option<Array2<f64>>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdherenceStep {
    /// Zero-based interval index (`y_{interval+1}` in one-based terms).
    pub interval: usize,
    pub prob: f64,
    /// Fraction of samples that continued treatment into the next interval.
    pub continued: f64,
    pub provenance: Provenance,
}

/// Rollout from step `start` (one-based): adherence for intervals
/// `start..=5` and scores for visits `start+1..=6`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrajectory {
    pub id: String,
    pub start: usize,
    pub samples: usize,
    pub scores: Vec<ScoreStep>,
    pub adherence: Vec<AdherenceStep>,
}

/// Prediction of `x_{t+1}` and `y_t` from the history up to step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneStepPrediction {
    pub id: String,
    pub step: usize,
    pub score_mean: Vec<f64>,
    pub score_std: Vec<f64>,
    pub adherence_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "actions")]
pub enum ActionMode {
    /// `a_u = 1[y_hat_u >= threshold]`, absorbing at 0.
    Inferred,
    /// Actions `a_{t..5}` supplied by the caller.
    Fixed(Vec<f64>),
}

/// Common interface used by evaluation and serving.
pub trait SequenceModel: Send + Sync {
    fn kind(&self) -> &'static str;

    fn stats(&self) -> &NormalizationStats;

    fn threshold(&self) -> f64;

    fn predict_one_step(
        &self,
        batch: &SequenceBatch,
        t: usize,
        samples: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<OneStepPrediction>>;

    fn rollout(
        &self,
        batch: &SequenceBatch,
        t: usize,
        mode: &ActionMode,
        samples: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<PredictionTrajectory>>;
}

/// Rejects `t` outside the one-based prediction range `1..=5`.
pub fn check_step(t: usize) -> Result<()> {
    if !(1..=NUM_INTERVALS).contains(&t) {
        return Err(Error::StepOutOfRange {
            step: t,
            lo: 1,
            hi: NUM_INTERVALS,
        });
    }
    Ok(())
}

/// Checks that `suffix` is a binary action sequence `a_{t..5}` that keeps
/// treatment absorbing when appended to the observed actions `history`.
pub fn check_action_suffix(history: &[f64], suffix: &[f64], t: usize) -> Result<()> {
    check_step(t)?;
    let want = NUM_VISITS - t;
    if suffix.len() != want {
        return Err(Error::InvalidArgument(format!(
            "action suffix from step {t} must have {want} entries, got {}",
            suffix.len()
        )));
    }
    if let Some(v) = suffix.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::InvalidArgument(format!("action {v} is not binary")));
    }
    let mut stopped = false;
    for (u, &a) in history.iter().chain(suffix).enumerate() {
        if a == 0.0 {
            stopped = true;
        } else if stopped {
            return Err(Error::AbsorptionViolation(format!(
                "a{} = 1 after treatment stopped",
                u + 1
            )));
        }
    }
    Ok(())
}

/// Row `b` of `a`, first `t - 1` entries: the observed actions before step `t`.
pub fn action_history(batch: &SequenceBatch, b: usize, t: usize) -> Vec<f64> {
    (0..t - 1).map(|u| batch.a[[b, u]]).collect()
}

/// Mean and population std across rows of a `K x D` matrix.
pub fn column_mean_std(samples: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let k = samples.nrows().max(1) as f64;
    let mut mean = Vec::with_capacity(samples.ncols());
    let mut std = Vec::with_capacity(samples.ncols());
    for col in samples.columns() {
        let m = col.sum() / k;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / k;
        mean.push(m);
        std.push(v.sqrt());
    }
    (mean, std)
}

/// Row indices that repeat every row of an `n`-row batch `k` times.
pub fn replicate_rows(n: usize, k: usize) -> Vec<usize> {
    (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect()
}
