use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{classification_metrics, rmse, PositiveClass};
use super::table::{FoldRow, Metric, MetricKey, Protocol, ProtocolResult, ALL_FEATURES};
use crate::dataset::{PatientRecord, SequenceBatch, DEFAULT_SCORE_NAMES, MEDICATION_DIM, NUM_INTERVALS, NUM_VISITS, SYMPTOM_MAX};
use crate::error::{Error, Result};
use crate::trajectory::{ActionMode, SequenceModel, DEFAULT_SAMPLES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub protocol: Protocol,
    /// Latent samples per patient; ignored by deterministic models.
    pub samples: usize,
    pub seed: u64,
    pub use_post_withdrawal_scores: bool,
    pub positive: PositiveClass,
    pub score_names: Vec<String>,
    /// Patients per prediction call, bounding memory for sampled models.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::OneStep,
            samples: DEFAULT_SAMPLES,
            seed: 0,
            use_post_withdrawal_scores: false,
            positive: PositiveClass::Continuation,
            score_names: DEFAULT_SCORE_NAMES.iter().map(|s| s.to_string()).collect(),
            chunk: 16,
        }
    }
}

/// Predictions for one start step and horizon, aligned with the records.
struct Scored {
    step: usize,
    horizon: usize,
    score_pred: Array2<f64>,
    probs: Vec<f64>,
}

/// Noise stream for one fold and start step, independent of evaluation order.
fn stream_rng(seed: u64, fold: usize, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((fold * (NUM_VISITS + 1) + step) as u64);
    rng
}

fn predict_fold(
    model: &dyn SequenceModel,
    batch: &SequenceBatch,
    fold: usize,
    config: &EvalConfig,
) -> Result<Vec<Scored>> {
    let n = batch.len();
    let d = batch.x[0].ncols();
    let mut out = Vec::new();
    for t in 1..=NUM_INTERVALS {
        let mut rng = stream_rng(config.seed, fold, t);
        let horizons = match config.protocol {
            Protocol::OneStep => 1,
            Protocol::Rollout => NUM_VISITS - t,
        };
        let mut scored: Vec<Scored> = (1..=horizons)
            .map(|horizon| Scored {
                step: t,
                horizon,
                score_pred: Array2::zeros((n, d)),
                probs: vec![0.0; n],
            })
            .collect();
        let mut offset = 0;
        for chunk in batch.chunks(config.chunk.max(1)) {
            match config.protocol {
                Protocol::OneStep => {
                    for (i, p) in model.predict_one_step(&chunk, t, config.samples, &mut rng)?.into_iter().enumerate() {
                        scored[0].score_pred.row_mut(offset + i).assign(&ndarray::aview1(&p.score_mean));
                        scored[0].probs[offset + i] = p.adherence_prob;
                    }
                }
                Protocol::Rollout => {
                    let trajs = model.rollout(&chunk, t, &ActionMode::Inferred, config.samples, &mut rng)?;
                    for (i, traj) in trajs.iter().enumerate() {
                        for (h, s) in scored.iter_mut().enumerate() {
                            s.score_pred.row_mut(offset + i).assign(&ndarray::aview1(&traj.scores[h].mean));
                            s.probs[offset + i] = traj.adherence[h].prob;
                        }
                    }
                }
            }
            offset += chunk.len();
        }
        out.extend(scored);
    }
    Ok(out)
}

/// Raw targets and masks at zero-based visit `visit`.
fn score_targets(records: &[&PatientRecord], visit: usize, use_post: bool) -> (Array2<f64>, Vec<bool>) {
    let d = records[0].x.ncols();
    let mut target = Array2::zeros((records.len(), d));
    let mut mask = Vec::with_capacity(records.len());
    for (b, r) in records.iter().enumerate() {
        let ok = r.usable_mask(use_post)[visit];
        mask.push(ok);
        if ok {
            target.row_mut(b).assign(&r.x.row(visit));
        }
    }
    (target, mask)
}

fn labels(records: &[&PatientRecord], interval: usize) -> Vec<f64> {
    records.iter().map(|r| f64::from(r.y[interval])).collect()
}

fn score_rows(
    model: &str,
    protocol: Protocol,
    s: &Scored,
    records: &[&PatientRecord],
    fold: usize,
    config: &EvalConfig,
) -> Result<Vec<FoldRow>> {
    let visit = s.step + s.horizon - 1;
    let (target, mask) = score_targets(records, visit, config.use_post_withdrawal_scores);
    if !mask.iter().any(|m| *m) {
        log::warn!("no observed scores at visit {} for step {} horizon {}", visit + 1, s.step, s.horizon);
        return Ok(Vec::new());
    }
    let r = rmse(&s.score_pred, &target, &mask)?;
    let key = |feature: &str| MetricKey {
        model: model.to_string(),
        protocol,
        step: s.step,
        horizon: s.horizon,
        metric: Metric::Rmse,
        feature: feature.to_string(),
    };
    let mut rows = vec![FoldRow {
        key: key(ALL_FEATURES),
        fold,
        value: r.aggregate,
        undefined: false,
    }];
    for (name, v) in config.score_names.iter().zip(&r.per_dim) {
        rows.push(FoldRow {
            key: key(name),
            fold,
            value: *v,
            undefined: false,
        });
    }
    Ok(rows)
}

fn adherence_rows(
    model: &str,
    protocol: Protocol,
    s: &Scored,
    records: &[&PatientRecord],
    fold: usize,
    threshold: f64,
    config: &EvalConfig,
) -> Result<Vec<FoldRow>> {
    let interval = s.step + s.horizon - 2;
    let m = classification_metrics(&s.probs, &labels(records, interval), threshold, config.positive)?;
    let key = |metric| MetricKey {
        model: model.to_string(),
        protocol,
        step: s.step,
        horizon: s.horizon,
        metric,
        feature: ALL_FEATURES.to_string(),
    };
    Ok([
        (Metric::Accuracy, m.accuracy, false),
        (Metric::Precision, m.precision, m.precision_undefined),
        (Metric::Recall, m.recall, m.recall_undefined),
        (Metric::F1, m.f1, m.precision_undefined || m.recall_undefined),
    ]
    .into_iter()
    .map(|(metric, value, undefined)| FoldRow {
        key: key(metric),
        fold,
        value,
        undefined,
    })
    .collect())
}

fn check_names(records: &[&PatientRecord], config: &EvalConfig) -> Result<()> {
    let Some(first) = records.first() else {
        return Err(Error::InvalidArgument("no test records".into()));
    };
    if config.score_names.len() != first.x.ncols() {
        return Err(Error::DimensionMismatch {
            context: "evaluation score names",
            expected: first.x.ncols(),
            actual: config.score_names.len(),
        });
    }
    Ok(())
}

/// Scores every fold model on the same test records. Fold `i` is `models[i]`.
pub fn run_protocol(
    models: &[&dyn SequenceModel],
    records: &[&PatientRecord],
    config: &EvalConfig,
) -> Result<ProtocolResult> {
    check_names(records, config)?;
    let mut rows = Vec::new();
    for (fold, model) in models.iter().enumerate() {
        let batch = SequenceBatch::from_records(records, model.stats(), config.use_post_withdrawal_scores)?;
        for s in predict_fold(*model, &batch, fold, config)? {
            rows.extend(score_rows(model.kind(), config.protocol, &s, records, fold, config)?);
            rows.extend(adherence_rows(model.kind(), config.protocol, &s, records, fold, model.threshold(), config)?);
        }
    }
    Ok(ProtocolResult::from_folds(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    UniformRandomScore,
    RandomAdherence,
}

impl BaselineKind {
    pub fn model_name(self) -> &'static str {
        match self {
            BaselineKind::UniformRandomScore => "uniform_random_score",
            BaselineKind::RandomAdherence => "random_adherence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub seed: u64,
}

impl BaselineSpec {
    /// `[0, 10]` for the symptom items and `[0, max observed]` for the
    /// medication score.
    pub fn default_support(kind: BaselineKind, records: &[&PatientRecord], seed: u64) -> Self {
        let d = records.first().map_or(DEFAULT_SCORE_NAMES.len(), |r| r.x.ncols());
        let mut upper = vec![SYMPTOM_MAX; d];
        if MEDICATION_DIM < d {
            upper[MEDICATION_DIM] = records
                .iter()
                .flat_map(|r| r.x.column(MEDICATION_DIM).to_vec())
                .filter(|v| v.is_finite())
                .fold(0.0, f64::max);
        }
        Self {
            kind,
            lower: vec![0.0; d],
            upper,
            seed,
        }
    }

    fn check(&self, dims: usize) -> Result<()> {
        if self.lower.len() != dims || self.upper.len() != dims {
            return Err(Error::DimensionMismatch {
                context: "baseline support",
                expected: dims,
                actual: self.lower.len().min(self.upper.len()),
            });
        }
        for (k, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidArgument(format!("baseline support for dim {k} is [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// One-step metrics of a random predictor: uniform scores over the support,
/// or adherence drawn uniformly from `{0, 1}`.
pub fn random_baseline(spec: &BaselineSpec, records: &[&PatientRecord], config: &EvalConfig) -> Result<ProtocolResult> {
    check_names(records, config)?;
    let d = records[0].x.ncols();
    spec.check(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = records.len();
    let mut rows = Vec::new();
    for t in 1..=NUM_INTERVALS {
        let score_pred = Array2::from_shape_fn((n, d), |(_, k)| {
            let (lo, hi) = (spec.lower[k], spec.upper[k]);
            if lo == hi { lo } else { rng.random_range(lo..hi) }
        });
        let probs = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let s = Scored {
            step: t,
            horizon: 1,
            score_pred,
            probs,
        };
        let name = spec.kind.model_name();
        match spec.kind {
            BaselineKind::UniformRandomScore => rows.extend(score_rows(name, Protocol::OneStep, &s, records, 0, config)?),
            BaselineKind::RandomAdherence => {
                rows.extend(adherence_rows(name, Protocol::OneStep, &s, records, 0, 0.5, config)?)
            }
        }
    }
    Ok(ProtocolResult::from_folds(rows))
}
