//! JSON request and response bodies of the HTTP service.
//!
//! Visits are one-based (`1..=6`, months 0 to 36) and so are steps: step `t`
//! predicts adherence `y_t` and the next visit's scores `x_{t+1}`.

use adhere_core::dataset::{
    NormalizationStats, PatientRecord, SequenceBatch, MEDICATION_DIM, NUM_INTERVALS, NUM_VISITS, SCORE_DIM, STATIC_DIM,
    SYMPTOM_MAX, VISIT_MONTHS,
};
use adhere_core::trajectory::check_action_suffix;
use adhere_core::Error;
use axum::http::StatusCode;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Largest `samples` accepted per request.
pub const MAX_SAMPLES: usize = 2000;
pub const MAX_SCENARIOS: usize = 16;
/// Seeds drawn by the server stay below 2^53 so browsers can echo them.
pub const SEED_BITS: u32 = 53;
pub const DEFAULT_REQUEST_SAMPLES: usize = 100;

/// A rejected request: status, offending field and message.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub error: String,
    pub field: Option<String>,
}

impl ApiError {
    pub fn bad_request(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            error: msg.into(),
            field: Some(field.into()),
        }
    }

    pub fn unprocessable(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            error: msg.into(),
            field: Some(field.into()),
        }
    }

    pub fn not_found(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            error: msg.into(),
            field: Some(field.into()),
        }
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            error: msg.into(),
            field: None,
        }
    }

    /// Maps a model error raised while answering a valid-looking request.
    pub fn from_model(field: &str, e: Error) -> Self {
        match e {
            Error::AbsorptionViolation(_) => Self::unprocessable(field, e.to_string()),
            Error::InvalidArgument(_) | Error::StepOutOfRange { .. } | Error::DimensionMismatch { .. } => {
                Self::bad_request(field, e.to_string())
            }
            other => Self::internal(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisitInput {
    /// One-based visit number.
    pub visit: usize,
    pub scores: Vec<f64>,
}

/// A patient's raw inputs. `actions[u]` is `a_{u+1}` (1 = treatment continued).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientInput {
    #[serde(rename = "static")]
    pub statics: Vec<f64>,
    pub visits: Vec<VisitInput>,
    #[serde(default)]
    pub actions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    /// `slvm` (default) or `lstm`.
    pub model: Option<String>,
    pub patient: PatientInput,
    /// Visits `1..=step` may be given; `actions` holds `a_1..a_step`.
    pub step: usize,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioInput {
    pub name: String,
    /// `a_start..a_5`.
    pub actions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    pub model: Option<String>,
    pub patient: PatientInput,
    /// Visits `1..=start` may be given; `actions` holds `a_1..a_{start-1}`.
    pub start: usize,
    pub scenarios: Vec<ScenarioInput>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub kind: String,
    pub config_hash: String,
    pub data_sha256: Option<String>,
    pub fold: Option<usize>,
    pub seed: u64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub static_dim: usize,
    pub score_dim: usize,
    pub step_months: Vec<u32>,
    pub model_kinds: Vec<String>,
    /// Hash of the default (latent) model's run config.
    pub config_hash: String,
    pub models: Vec<ModelInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInfo {
    pub index: usize,
    pub name: String,
    /// Training mean and std in raw units.
    pub mean: f64,
    pub std: f64,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesResponse {
    pub statics: Vec<FeatureInfo>,
    pub scores: Vec<FeatureInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub model: ModelInfo,
    pub seed: u64,
    pub samples: usize,
    pub step: usize,
    /// Visit whose scores are predicted, `step + 1`.
    pub visit: usize,
    pub month: u32,
    pub score_mean: Vec<f64>,
    pub score_std: Vec<f64>,
    pub adherence_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdherencePoint {
    pub step: usize,
    pub prob: f64,
    /// Fraction of samples continuing treatment after this step.
    pub continued: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePoint {
    pub visit: usize,
    pub month: u32,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub median: Vec<f64>,
    /// Central 80% band across samples.
    pub p10: Vec<f64>,
    pub p90: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTrajectory {
    pub name: String,
    pub actions: Vec<f64>,
    /// Steps `start..=5`.
    pub adherence: Vec<AdherencePoint>,
    /// Visits `start+1..=6`.
    pub scores: Vec<ScorePoint>,
    /// Mean of the visit-6 prediction over samples and score dims.
    pub final_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub model: ModelInfo,
    pub seed: u64,
    pub samples: usize,
    pub start: usize,
    pub scenarios: Vec<ScenarioTrajectory>,
    /// `deltas[i][j] = final_mean[i] - final_mean[j]`.
    pub deltas: Vec<Vec<f64>>,
}

pub fn month(visit: usize) -> u32 {
    VISIT_MONTHS[visit - 1]
}

/// Rounds to 9 significant digits; integers and non-finite values pass through.
pub fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() || v.fract() == 0.0 {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

/// Applies [`round_sig9`] to every float in a JSON tree.
pub fn round_json(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Number(n) if n.is_f64() => {
            let r = round_sig9(n.as_f64().expect("f64 number"));
            if let Some(num) = serde_json::Number::from_f64(r) {
                *n = num;
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_json),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_json),
        _ => {}
    }
}

pub fn check_samples(samples: Option<usize>) -> Result<usize, ApiError> {
    let k = samples.unwrap_or(DEFAULT_REQUEST_SAMPLES);
    if k == 0 || k > MAX_SAMPLES {
        return Err(ApiError::bad_request("samples", format!("samples must lie in 1..={MAX_SAMPLES}, got {k}")));
    }
    Ok(k)
}

fn check_actions(field: &str, actions: &[f64]) -> Result<(), ApiError> {
    if let Some(u) = actions.iter().position(|&a| a != 0.0 && a != 1.0) {
        return Err(ApiError::bad_request(format!("{field}[{u}]"), "actions must be 0 or 1"));
    }
    let mut stopped = false;
    for (u, &a) in actions.iter().enumerate() {
        if a == 0.0 {
            stopped = true;
        } else if stopped {
            return Err(ApiError::unprocessable(
                format!("{field}[{u}]"),
                format!("a{} = 1 after treatment stopped", u + 1),
            ));
        }
    }
    Ok(())
}

/// Validates a patient observed through visit `last_visit` with exactly
/// `n_actions` actions and lays it out as a one-patient batch.
pub fn patient_batch(
    patient: &PatientInput,
    stats: &NormalizationStats,
    last_visit: usize,
    n_actions: usize,
) -> Result<SequenceBatch, ApiError> {
    if patient.statics.len() != STATIC_DIM {
        return Err(ApiError::bad_request(
            "patient.static",
            format!("expected {STATIC_DIM} static features, got {}", patient.statics.len()),
        ));
    }
    if let Some(k) = patient.statics.iter().position(|v| !v.is_finite()) {
        return Err(ApiError::bad_request(format!("patient.static[{k}]"), "static feature must be finite"));
    }
    let mut x = Array2::from_elem((NUM_VISITS, SCORE_DIM), f64::NAN);
    let mut mask = [false; NUM_VISITS];
    for (i, v) in patient.visits.iter().enumerate() {
        let field = format!("patient.visits[{i}]");
        if !(1..=last_visit).contains(&v.visit) {
            return Err(ApiError::bad_request(
                format!("{field}.visit"),
                format!("visit must lie in 1..={last_visit}, got {}", v.visit),
            ));
        }
        if mask[v.visit - 1] {
            return Err(ApiError::bad_request(format!("{field}.visit"), format!("visit {} given twice", v.visit)));
        }
        if v.scores.len() != SCORE_DIM {
            return Err(ApiError::bad_request(
                format!("{field}.scores"),
                format!("expected {SCORE_DIM} scores, got {}", v.scores.len()),
            ));
        }
        for (d, &s) in v.scores.iter().enumerate() {
            let ok = if d == MEDICATION_DIM {
                s.is_finite() && s >= 0.0
            } else {
                (0.0..=SYMPTOM_MAX).contains(&s)
            };
            if !ok {
                return Err(ApiError::bad_request(format!("{field}.scores[{d}]"), format!("score {s} out of range")));
            }
        }
        mask[v.visit - 1] = true;
        x.row_mut(v.visit - 1).assign(&ndarray::ArrayView1::from(&v.scores));
    }
    if !mask[0] {
        return Err(ApiError::bad_request("patient.visits", "visit 1 (month 0) is required"));
    }
    if patient.actions.len() != n_actions {
        return Err(ApiError::bad_request(
            "patient.actions",
            format!("expected {n_actions} actions, got {}", patient.actions.len()),
        ));
    }
    check_actions("patient.actions", &patient.actions)?;
    // Later entries are never read by the models; keep them absorbing.
    let mut y = [1u8; NUM_INTERVALS];
    let mut last = 1u8;
    for (u, slot) in y.iter_mut().enumerate() {
        if let Some(&a) = patient.actions.get(u) {
            last = a as u8;
        }
        *slot = last;
    }
    let record = PatientRecord {
        id: "request".into(),
        s: patient.statics.clone(),
        x,
        y,
        mask,
        withdrawal_reason: None,
    };
    SequenceBatch::from_records(&[&record], stats, true).map_err(|e| ApiError::internal(e.to_string()))
}

/// Checks every scenario against the observed history.
pub fn check_scenarios(history: &[f64], start: usize, scenarios: &[ScenarioInput]) -> Result<(), ApiError> {
    if scenarios.is_empty() || scenarios.len() > MAX_SCENARIOS {
        return Err(ApiError::bad_request(
            "scenarios",
            format!("between 1 and {MAX_SCENARIOS} scenarios required, got {}", scenarios.len()),
        ));
    }
    for (i, sc) in scenarios.iter().enumerate() {
        check_action_suffix(history, &sc.actions, start)
            .map_err(|e| ApiError::from_model(&format!("scenarios[{i}].actions"), e))?;
    }
    Ok(())
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}
