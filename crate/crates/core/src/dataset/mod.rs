//! Patient cohort: canonical schema, validation, normalization, splits and
//! augmentation.

mod batch;
mod io;
pub(crate) mod mixup;
mod normalize;
mod split;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::SequenceBatch;
pub use io::{load_cohort, read_cohort, write_cohort, ColumnMapping, CANONICAL_HEADER};
pub use mixup::{mix_pair, mixup_batch, mixup_with, DEFAULT_MIXUP_ALPHA};
pub use normalize::{fit_normalization, NormalizationStats, STD_EPSILON};
pub use split::{make_splits, Assignment, SplitSpec};

pub const STATIC_DIM: usize = 14;
pub const SCORE_DIM: usize = 11;
pub const NUM_VISITS: usize = 6;
pub const NUM_INTERVALS: usize = NUM_VISITS - 1;
pub const SCHEMA_VERSION: u32 = 1;

/// Months since enrollment of each visit.
pub const VISIT_MONTHS: [u32; NUM_VISITS] = [0, 4, 12, 18, 24, 36];

/// Index of the medication score within the score vector.
pub const MEDICATION_DIM: usize = SCORE_DIM - 1;

/// Upper bound of the visual-analogue symptom items.
pub const SYMPTOM_MAX: f64 = 10.0;

pub const DEFAULT_STATIC_NAMES: [&str; STATIC_DIM] = [
    "age",
    "gender",
    "distance_to_clinic",
    "cost_to_income",
    "eos_count",
    "eos_percent",
    "delta_nr",
    "delta_pnif",
    "total_ige",
    "sige_der_p",
    "sige_der_f",
    "spt_der_p",
    "spt_der_f",
    "static_14",
];

pub const DEFAULT_SCORE_NAMES: [&str; SCORE_DIM] = [
    "nasal_itching",
    "sneezing",
    "rhinorrhea",
    "nasal_congestion",
    "ocular_itching",
    "lacrimation",
    "shortness_of_breath",
    "chest_tightness",
    "cough",
    "wheezing",
    "medication_score",
];

/// Index of the distance-to-clinic static feature.
pub const DISTANCE_FEATURE: usize = 2;

/// One patient's static features, visit scores and adherence history.
///
/// `x` is `NUM_VISITS x SCORE_DIM`; unobserved visits hold NaN and are
/// flagged false in `mask`. `y[t]` is 1 when treatment continues through
/// interval `t -> t+1`; the action sequence equals `y` numerically.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub s: Vec<f64>,
    pub x: Array2<f64>,
    pub y: [u8; NUM_INTERVALS],
    pub mask: [bool; NUM_VISITS],
    pub withdrawal_reason: Option<String>,
}

impl PatientRecord {
    pub fn actions(&self) -> [f64; NUM_INTERVALS] {
        self.y.map(f64::from)
    }

    /// Index of the first interval with `y = 0`, if the patient withdrew.
    pub fn withdrawal_interval(&self) -> Option<usize> {
        self.y.iter().position(|&v| v == 0)
    }

    /// Observation mask, optionally hiding visits after withdrawal.
    pub fn usable_mask(&self, use_post_withdrawal_scores: bool) -> [bool; NUM_VISITS] {
        let mut mask = self.mask;
        if !use_post_withdrawal_scores {
            if let Some(t) = self.withdrawal_interval() {
                for m in mask.iter_mut().skip(t + 1) {
                    *m = false;
                }
            }
        }
        mask
    }

    pub fn visit(&self, t: usize) -> ndarray::ArrayView1<'_, f64> {
        self.x.row(t)
    }

    /// Checks every record invariant; `bounds` enables the raw score ranges.
    pub fn validate(&self, raw_bounds: bool) -> Result<()> {
        let id = &self.id;
        if id.is_empty() {
            return Err(Error::validation("<empty>", "empty id"));
        }
        if self.s.len() != STATIC_DIM {
            return Err(Error::validation(
                id,
                format!("expected {STATIC_DIM} static features, got {}", self.s.len()),
            ));
        }
        if let Some(k) = self.s.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(id, format!("static feature s{:02} missing or non-finite", k + 1)));
        }
        if self.x.dim() != (NUM_VISITS, SCORE_DIM) {
            return Err(Error::validation(id, "score matrix must be 6 x 11"));
        }
        if self.y[0] != 1 {
            return Err(Error::validation(id, "y1 must be 1 (first interval always completed)"));
        }
        let mut stopped = false;
        for (t, &v) in self.y.iter().enumerate() {
            match v {
                0 => stopped = true,
                1 if stopped => {
                    return Err(Error::validation(
                        id,
                        format!("non-monotone adherence: y{} = 1 after withdrawal", t + 1),
                    ))
                }
                1 => {}
                other => {
                    return Err(Error::validation(id, format!("y{} = {other} is not binary", t + 1)))
                }
            }
        }
        if !self.mask[0] {
            return Err(Error::validation(id, "baseline visit (month 0) must be observed"));
        }
        for t in 0..NUM_VISITS {
            let row = self.x.row(t);
            if !self.mask[t] {
                continue;
            }
            for (d, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::validation(id, format!("x{t}_{:02} missing in observed visit", d + 1)));
                }
                if raw_bounds {
                    let ok = if d == MEDICATION_DIM {
                        v >= 0.0
                    } else {
                        (0.0..=SYMPTOM_MAX).contains(&v)
                    };
                    if !ok {
                        return Err(Error::validation(
                            id,
                            format!("x{t}_{:02} = {v} outside its valid range", d + 1),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNames {
    pub statics: Vec<String>,
    pub scores: Vec<String>,
}

impl Default for FeatureNames {
    fn default() -> Self {
        Self {
            statics: DEFAULT_STATIC_NAMES.iter().map(|s| s.to_string()).collect(),
            scores: DEFAULT_SCORE_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    pub schema_version: u32,
    pub feature_names: FeatureNames,
}

impl Cohort {
    /// Validates every record and the cohort-level invariants.
    pub fn new(records: Vec<PatientRecord>, feature_names: FeatureNames) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            r.validate(true)?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::validation(&r.id, "duplicate id"));
            }
        }
        if feature_names.statics.len() != STATIC_DIM || feature_names.scores.len() != SCORE_DIM {
            return Err(Error::Schema("feature name lists must have 14 and 11 entries".into()));
        }
        Ok(Self {
            records,
            schema_version: SCHEMA_VERSION,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    /// Records whose id is in `ids`, in cohort order.
    pub fn select(&self, ids: &[String]) -> Vec<&PatientRecord> {
        let wanted: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        self.records
            .iter()
            .filter(|r| wanted.contains(r.id.as_str()))
            .collect()
    }
}
