//! Published reference figures and pass/fail checks against them.

use std::fmt;

use crate::attribution::FeatureImportance;
use crate::eval::{Metric, MetricTable, Protocol};

/// One-step adherence accuracy at steps 1..=5.
pub const SLVM_ACCURACY: [f64; 5] = [1.00, 0.70, 0.72, 0.71, 0.60];
pub const LSTM_ACCURACY: [f64; 5] = [1.00, 0.66, 0.80, 0.84, 0.74];
pub const SLVM_F1: [f64; 5] = [1.00, 0.81, 0.81, 0.78, 0.54];
pub const LSTM_F1: [f64; 5] = [1.00, 0.79, 0.84, 0.85, 0.62];
/// Range of per-step one-step RMSE.
pub const SLVM_RMSE_RANGE: (f64, f64) = (0.93, 2.22);
pub const LSTM_RMSE_RANGE: (f64, f64) = (1.09, 1.77);
/// RMSE of the random predictor.
pub const RANDOM_RMSE: f64 = 4.55;
/// Mean final-visit difference, all-ones minus all-zeros actions.
pub const SIMULATOR_DELTA: f64 = -0.20;

pub const ACCURACY_TOLERANCE: f64 = 0.10;
pub const F1_TOLERANCE: f64 = 0.12;
pub const RMSE_MARGIN: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

fn fmt_series(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

/// One-step means of `metric` at steps 1..=5, pooled over features.
pub fn one_step_series(table: &MetricTable, model: &str, metric: Metric) -> Vec<f64> {
    let mut rows: Vec<_> = table.series(model, Protocol::OneStep, metric).collect();
    rows.sort_by_key(|r| r.key.step);
    rows.iter().map(|r| r.mean).collect()
}

/// Every step's mean within `tolerance` of `reference`.
pub fn check_series(
    name: &str,
    table: &MetricTable,
    model: &str,
    metric: Metric,
    reference: &[f64],
    tolerance: f64,
) -> Check {
    let got = one_step_series(table, model, metric);
    let passed = got.len() == reference.len()
        && got.iter().zip(reference).all(|(g, r)| (g - r).abs() <= tolerance);
    Check {
        name: name.into(),
        passed,
        detail: format!(
            "{model} {metric} {} vs {} +- {tolerance}",
            fmt_series(&got),
            fmt_series(reference)
        ),
    }
}

/// Per-step one-step RMSE inside the widened published range, and every
/// one-step and rollout RMSE below the random predictor's.
pub fn check_rmse_envelope(name: &str, table: &MetricTable, model: &str, range: (f64, f64), margin: f64) -> Check {
    let one_step = one_step_series(table, model, Metric::Rmse);
    let (lo, hi) = (range.0 - margin, range.1 + margin);
    let in_range = one_step.len() == 5 && one_step.iter().all(|v| (lo..=hi).contains(v));
    let all: Vec<f64> = [Protocol::OneStep, Protocol::Rollout]
        .into_iter()
        .flat_map(|p| table.series(model, p, Metric::Rmse).map(|r| r.mean))
        .collect();
    let worst = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let below_random = !all.is_empty() && worst < RANDOM_RMSE;
    Check {
        name: name.into(),
        passed: in_range && below_random,
        detail: format!(
            "{model} one-step {} within [{lo:.2}, {hi:.2}]; worst of {} rows {worst:.3} < {RANDOM_RMSE}",
            fmt_series(&one_step),
            all.len()
        ),
    }
}

/// Every fold's delta negative and smaller than 1 in magnitude.
pub fn check_simulator_effect(name: &str, deltas: &[f64]) -> Check {
    let passed = !deltas.is_empty() && deltas.iter().all(|&d| d < 0.0 && d.abs() < 1.0);
    Check {
        name: name.into(),
        passed,
        detail: format!("fold deltas {} (reference {SIMULATOR_DELTA})", fmt_series(deltas)),
    }
}

/// `feature` among the `top` highest mean |attribution|.
pub fn check_feature_rank(name: &str, importance: &[FeatureImportance], feature: &str, top: usize) -> Check {
    let rank = importance.iter().find(|f| f.feature == feature).map(|f| f.rank);
    Check {
        name: name.into(),
        passed: rank.is_some_and(|r| r <= top),
        detail: match rank {
            Some(r) => format!("{feature} ranked {r} of {} (need <= {top})", importance.len()),
            None => format!("{feature} not among the attributed features"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{MetricKey, MetricRow, ALL_FEATURES};

    fn row(model: &str, protocol: Protocol, step: usize, metric: Metric, mean: f64) -> MetricRow {
        MetricRow {
            key: MetricKey {
                model: model.into(),
                protocol,
                step,
                horizon: 1,
                metric,
                feature: ALL_FEATURES.into(),
            },
            mean,
            std: 0.0,
            folds: 5,
        }
    }

    fn table(acc: [f64; 5], rmse: [f64; 5], rollout_rmse: f64) -> MetricTable {
        let mut rows = Vec::new();
        for t in 0..5 {
            rows.push(row("slvm", Protocol::OneStep, t + 1, Metric::Accuracy, acc[t]));
            rows.push(row("slvm", Protocol::OneStep, t + 1, Metric::Rmse, rmse[t]));
            rows.push(row("slvm", Protocol::Rollout, t + 1, Metric::Rmse, rollout_rmse));
        }
        MetricTable { rows }
    }

    #[test]
    fn references_match_the_published_table() {
        // Table rows as printed, step by step.
        assert_eq!(SLVM_ACCURACY, [1.0, 0.7, 0.72, 0.71, 0.6]);
        assert_eq!(LSTM_F1[1], 0.79);
        assert_eq!(SLVM_RMSE_RANGE, (0.93, 2.22));
    }

    #[test]
    fn series_tolerance_is_inclusive() {
        let t = table([0.95, 0.8, 0.62, 0.71, 0.7], [1.0; 5], 2.0);
        assert!(check_series("c1", &t, "slvm", Metric::Accuracy, &SLVM_ACCURACY, 0.10 + 1e-12).passed);
        let off = table([0.95, 0.81, 0.62, 0.71, 0.7], [1.0; 5], 2.0);
        assert!(!check_series("c1", &off, "slvm", Metric::Accuracy, &SLVM_ACCURACY, 0.10).passed);
        assert!(!check_series("c1", &t, "lstm", Metric::Accuracy, &SLVM_ACCURACY, 0.10).passed);
    }

    #[test]
    fn rmse_envelope() {
        let ok = table([1.0; 5], [0.7, 1.0, 2.0, 2.5, 1.5], 4.0);
        assert!(check_rmse_envelope("c3", &ok, "slvm", SLVM_RMSE_RANGE, RMSE_MARGIN).passed);
        let high = table([1.0; 5], [0.7, 1.0, 2.0, 2.6, 1.5], 4.0);
        assert!(!check_rmse_envelope("c3", &high, "slvm", SLVM_RMSE_RANGE, RMSE_MARGIN).passed);
        let random = table([1.0; 5], [1.0; 5], 4.55);
        assert!(!check_rmse_envelope("c3", &random, "slvm", SLVM_RMSE_RANGE, RMSE_MARGIN).passed);
    }

    #[test]
    fn simulator_and_rank() {
        assert!(check_simulator_effect("c4", &[-0.2, -0.05]).passed);
        assert!(!check_simulator_effect("c4", &[-0.2, 0.01]).passed);
        assert!(!check_simulator_effect("c4", &[-1.2]).passed);
        assert!(!check_simulator_effect("c4", &[]).passed);
        let imp = |feature: &str, rank| FeatureImportance {
            feature: feature.into(),
            mean_abs: 1.0,
            mean: 0.0,
            std: 0.0,
            rank,
        };
        let table = [imp("age", 1), imp("distance_to_clinic", 2), imp("gender", 3)];
        assert!(check_feature_rank("c7", &table, "distance_to_clinic", 2).passed);
        assert!(!check_feature_rank("c7", &table, "gender", 2).passed);
        assert!(!check_feature_rank("c7", &table, "missing", 2).passed);
    }
}
