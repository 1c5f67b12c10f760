use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature label for metrics pooled over every score dim.
pub const ALL_FEATURES: &str = "all";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    OneStep,
    Rollout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    F1,
    Rmse,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"),
                        other
                    ))),
                }
            }
        }
    };
}

text_enum!(Protocol { OneStep => "one_step", Rollout => "rollout" });
text_enum!(Metric {
    Accuracy => "accuracy",
    Precision => "precision",
    Recall => "recall",
    F1 => "f1",
    Rmse => "rmse",
});

/// Identifies one number in a report. `step` is the one-based start step;
/// `horizon` counts predictions ahead of it (1 for one-step).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MetricKey {
    pub model: String,
    pub protocol: Protocol,
    pub step: usize,
    pub horizon: usize,
    pub metric: Metric,
    pub feature: String,
}

/// One metric from one fold model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    #[serde(flatten)]
    pub key: MetricKey,
    pub fold: usize,
    pub value: f64,
    /// Zero-denominator rate reported as 0.
    pub undefined: bool,
}

/// Mean and sample std of a metric across fold models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(flatten)]
    pub key: MetricKey,
    pub mean: f64,
    pub std: f64,
    pub folds: usize,
}

/// Summary rows sorted by key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

/// Mean and sample standard deviation (`n - 1`); the std of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl MetricTable {
    pub fn from_folds(folds: &[FoldRow]) -> Self {
        let mut groups: BTreeMap<&MetricKey, Vec<f64>> = BTreeMap::new();
        for row in folds {
            groups.entry(&row.key).or_default().push(row.value);
        }
        let rows = groups
            .into_iter()
            .map(|(key, values)| {
                let (mean, std) = mean_std(&values);
                MetricRow {
                    key: key.clone(),
                    mean,
                    std,
                    folds: values.len(),
                }
            })
            .collect();
        Self { rows }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, key: &MetricKey) -> Option<&MetricRow> {
        self.rows.iter().find(|r| &r.key == key)
    }

    /// Rows pooled over all features for one model, protocol and metric.
    pub fn series<'a>(
        &'a self,
        model: &'a str,
        protocol: Protocol,
        metric: Metric,
    ) -> impl Iterator<Item = &'a MetricRow> + 'a {
        self.rows.iter().filter(move |r| {
            r.key.model == model && r.key.protocol == protocol && r.key.metric == metric && r.key.feature == ALL_FEATURES
        })
    }

    pub fn extend(&mut self, other: MetricTable) {
        self.rows.extend(other.rows);
        self.rows.sort_by(|a, b| a.key.cmp(&b.key));
    }
}

/// Per-fold rows together with their summary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProtocolResult {
    pub folds: Vec<FoldRow>,
    pub table: MetricTable,
}

impl ProtocolResult {
    pub fn from_folds(mut folds: Vec<FoldRow>) -> Self {
        folds.sort_by(|a, b| a.key.cmp(&b.key).then(a.fold.cmp(&b.fold)));
        let table = MetricTable::from_folds(&folds);
        Self { folds, table }
    }

    pub fn merge(results: impl IntoIterator<Item = ProtocolResult>) -> Self {
        Self::from_folds(results.into_iter().flat_map(|r| r.folds).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(metric: Metric, step: usize) -> MetricKey {
        MetricKey {
            model: "m".into(),
            protocol: Protocol::OneStep,
            step,
            horizon: 1,
            metric,
            feature: ALL_FEATURES.into(),
        }
    }

    #[test]
    fn text_roundtrip() {
        for p in [Protocol::OneStep, Protocol::Rollout] {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
        }
        for m in [Metric::Accuracy, Metric::Precision, Metric::Recall, Metric::F1, Metric::Rmse] {
            assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
        }
        assert!("auc".parse::<Metric>().is_err());
    }

    #[test]
    fn aggregation_matches_recomputation() {
        let values = [0.7, 0.8, 0.6, 0.9, 0.75];
        let folds: Vec<FoldRow> = values
            .iter()
            .enumerate()
            .map(|(fold, &value)| FoldRow {
                key: key(Metric::Accuracy, 2),
                fold,
                value,
                undefined: false,
            })
            .collect();
        let table = MetricTable::from_folds(&folds);
        let row = table.get(&key(Metric::Accuracy, 2)).unwrap();
        assert_eq!(row.folds, 5);
        assert!((row.mean - 0.75).abs() < 1e-12);
        let var = values.iter().map(|v| (v - 0.75f64).powi(2)).sum::<f64>() / 4.0;
        assert!((row.std - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_value_has_zero_std() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        assert!(mean_std(&[]).0.is_nan());
    }
}
