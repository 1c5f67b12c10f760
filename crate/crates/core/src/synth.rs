//! Synthetic cohorts with the release schema, for demos and pipeline tests.
//!
//! Each patient has a latent severity that drives baseline symptoms. While
//! treated, symptoms decay toward a floor; after withdrawal they drift back.
//! Withdrawal hazard grows with distance to the clinic and cost burden, so
//! attribution on a model trained here should rank distance highly.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    Cohort, FeatureNames, PatientRecord, MEDICATION_DIM, NUM_INTERVALS, NUM_VISITS, SCORE_DIM, STATIC_DIM, SYMPTOM_MAX,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub patients: usize,
    pub seed: u64,
    /// Chance that a visit before withdrawal is missed.
    pub missing_rate: f64,
    /// Chance that a visit after withdrawal is still recorded.
    pub post_withdrawal_rate: f64,
    /// Log-odds weight of standardized distance on the withdrawal hazard.
    pub distance_effect: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patients: 205,
            seed: 0,
            missing_rate: 0.05,
            post_withdrawal_rate: 0.5,
            distance_effect: 1.5,
        }
    }
}

const BASE_HAZARD: f64 = -1.6;
const COST_EFFECT: f64 = 0.6;
const DISTANCE_MEDIAN_KM: f64 = 15.0;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

fn statics<R: Rng>(rng: &mut R, severity: f64) -> Vec<f64> {
    let normal = |m: f64, s: f64| Normal::new(m, s).expect("valid normal");
    let distance = LogNormal::new(DISTANCE_MEDIAN_KM.ln(), 0.8).expect("valid lognormal").sample(rng);
    let eos_count = (normal(300.0, 120.0).sample(rng) + 60.0 * severity).max(10.0);
    vec![
        rng.random_range(18..=65) as f64,
        f64::from(rng.random_bool(0.5)),
        round1(distance),
        (normal(0.08, 0.04).sample(rng)).clamp(0.0, 0.5),
        eos_count.round(),
        round1((eos_count / 80.0).clamp(0.5, 15.0)),
        round1(normal(1.0, 0.8).sample(rng) + 0.3 * severity),
        round1(normal(20.0, 15.0).sample(rng)),
        (normal(250.0, 150.0).sample(rng) + 40.0 * severity).max(5.0).round(),
        round1((normal(30.0, 25.0).sample(rng) + 8.0 * severity).max(0.35)),
        round1((normal(25.0, 25.0).sample(rng)).max(0.35)),
        round1((normal(8.0, 3.0).sample(rng)).max(0.0)),
        round1((normal(7.0, 3.0).sample(rng)).max(0.0)),
        f64::from(rng.random_bool(0.3)),
    ]
}

fn patient<R: Rng>(rng: &mut R, id: String, config: &SynthConfig) -> PatientRecord {
    let noise = Normal::new(0.0, 0.6).expect("valid normal");
    let severity: f64 = Normal::new(0.0, 1.0).expect("valid normal").sample(rng);
    let s = statics(rng, severity);
    debug_assert_eq!(s.len(), STATIC_DIM);

    let z_distance = (s[2].ln() - DISTANCE_MEDIAN_KM.ln()) / 0.8;
    let z_cost = (s[3] - 0.08) / 0.04;
    let mut y = [1u8; NUM_INTERVALS];
    for t in 1..NUM_INTERVALS {
        if y[t - 1] == 0 {
            y[t] = 0;
            continue;
        }
        let hazard = sigmoid(BASE_HAZARD + config.distance_effect * z_distance + COST_EFFECT * z_cost);
        if rng.random_bool(hazard) {
            y[t] = 0;
        }
    }

    let mut x = Array2::zeros((NUM_VISITS, SCORE_DIM));
    let mut level: Vec<f64> = (0..SCORE_DIM).map(|d| 5.0 + 1.5 * severity + 0.3 * d as f64 - 1.5).collect();
    for t in 0..NUM_VISITS {
        if t > 0 {
            let treated = y[t - 1] == 1;
            for v in &mut level {
                *v += if treated { -0.25 * (*v - 1.0) } else { 0.3 * (6.0 + severity - *v) };
            }
        }
        for d in 0..SCORE_DIM {
            let v = level[d] + noise.sample(rng);
            x[[t, d]] = if d == MEDICATION_DIM {
                round1(v.max(0.0) * 0.6)
            } else {
                round1(v.clamp(0.0, SYMPTOM_MAX))
            };
        }
    }

    let withdrawn = y.iter().position(|&v| v == 0);
    let mut mask = [true; NUM_VISITS];
    for (t, m) in mask.iter_mut().enumerate().skip(1) {
        let after = withdrawn.is_some_and(|w| t > w);
        let keep = if after {
            config.post_withdrawal_rate
        } else {
            1.0 - config.missing_rate
        };
        *m = rng.random_bool(keep.clamp(0.0, 1.0));
    }
    for (t, &m) in mask.iter().enumerate() {
        if !m {
            x.row_mut(t).fill(f64::NAN);
        }
    }
    let reason = withdrawn.map(|_| if z_distance > 0.5 { "distance" } else { "other" }.to_string());
    PatientRecord {
        id,
        s,
        x,
        y,
        mask,
        withdrawal_reason: reason,
    }
}

/// Generates `config.patients` valid records; identical configs give
/// identical cohorts.
pub fn generate(config: &SynthConfig) -> Result<Cohort> {
    if config.patients == 0 {
        return Err(Error::InvalidArgument("synthetic cohort needs at least one patient".into()));
    }
    for (name, p) in [
        ("missing_rate", config.missing_rate),
        ("post_withdrawal_rate", config.post_withdrawal_rate),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("{name} {p} outside [0, 1]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let width = config.patients.to_string().len().max(3);
    let records = (0..config.patients)
        .map(|i| patient(&mut rng, format!("P{:0width$}", i + 1), config))
        .collect();
    Cohort::new(records, FeatureNames::default())
}
