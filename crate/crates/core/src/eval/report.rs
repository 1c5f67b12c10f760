use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::table::{FoldRow, Metric, MetricKey, MetricRow, MetricTable, ProtocolResult, ALL_FEATURES};
use crate::dataset::{PatientRecord, SYMPTOM_MAX};
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FOLD_METRICS_FILE: &str = "fold_metrics.csv";
pub const RMSE_BY_STEP_FILE: &str = "rmse_by_step.csv";
pub const RMSE_BY_FEATURE_FILE: &str = "rmse_by_feature.csv";
pub const HISTOGRAM_FILE: &str = "score_histogram.csv";

const METRIC_HEADER: [&str; 9] = ["model", "protocol", "step", "horizon", "metric", "feature", "mean", "std", "folds"];
const FOLD_HEADER: [&str; 9] = ["model", "protocol", "fold", "step", "horizon", "metric", "feature", "value", "undefined"];

fn key_fields(k: &MetricKey) -> [String; 6] {
    [
        k.model.clone(),
        k.protocol.to_string(),
        k.step.to_string(),
        k.horizon.to_string(),
        k.metric.to_string(),
        k.feature.clone(),
    ]
}

fn field(row: &csv::StringRecord, i: usize) -> Result<&str> {
    row.get(i).ok_or_else(|| Error::Schema(format!("report row has {} fields, expected more than {i}", row.len())))
}

fn parse<T: std::str::FromStr>(row: &csv::StringRecord, i: usize) -> Result<T> {
    let s = field(row, i)?;
    s.parse().map_err(|_| Error::Schema(format!("cannot parse `{s}` in report column {i}")))
}

pub fn write_metric_table<W: Write>(table: &MetricTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRIC_HEADER)?;
    for r in &table.rows {
        let mut rec: Vec<String> = key_fields(&r.key).into();
        rec.extend([r.mean.to_string(), r.std.to_string(), r.folds.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<metric table>", e))?;
    Ok(())
}

pub fn read_metric_table<R: Read>(reader: R) -> Result<MetricTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    if rdr.headers()?.iter().ne(METRIC_HEADER) {
        return Err(Error::Schema("unexpected metrics header".into()));
    }
    let mut rows = Vec::new();
    for row in rdr.records() {
        let row = row?;
        rows.push(MetricRow {
            key: MetricKey {
                model: field(&row, 0)?.to_string(),
                protocol: field(&row, 1)?.parse()?,
                step: parse(&row, 2)?,
                horizon: parse(&row, 3)?,
                metric: field(&row, 4)?.parse()?,
                feature: field(&row, 5)?.to_string(),
            },
            mean: parse(&row, 6)?,
            std: parse(&row, 7)?,
            folds: parse(&row, 8)?,
        });
    }
    Ok(MetricTable { rows })
}

pub fn write_fold_rows<W: Write>(rows: &[FoldRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FOLD_HEADER)?;
    for r in rows {
        let [model, protocol, step, horizon, metric, feature] = key_fields(&r.key);
        w.write_record([
            model,
            protocol,
            r.fold.to_string(),
            step,
            horizon,
            metric,
            feature,
            r.value.to_string(),
            r.undefined.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<fold rows>", e))?;
    Ok(())
}

pub fn read_fold_rows<R: Read>(reader: R) -> Result<Vec<FoldRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    if rdr.headers()?.iter().ne(FOLD_HEADER) {
        return Err(Error::Schema("unexpected fold metrics header".into()));
    }
    let mut rows = Vec::new();
    for row in rdr.records() {
        let row = row?;
        rows.push(FoldRow {
            key: MetricKey {
                model: field(&row, 0)?.to_string(),
                protocol: field(&row, 1)?.parse()?,
                step: parse(&row, 3)?,
                horizon: parse(&row, 4)?,
                metric: field(&row, 5)?.parse()?,
                feature: field(&row, 6)?.to_string(),
            },
            fold: parse(&row, 2)?,
            value: parse(&row, 7)?,
            undefined: parse(&row, 8)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub feature: String,
    pub bin_lower: f64,
    pub bin_upper: f64,
    pub count: usize,
}

/// Unit-width bins `[k, k+1)` from 0 up to the larger of the symptom maximum
/// and the largest observed value; the top bin is closed.
pub fn score_histogram(records: &[&PatientRecord], names: &[String], use_post: bool) -> Result<Vec<HistogramRow>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let d = first.x.ncols();
    if names.len() != d {
        return Err(Error::DimensionMismatch {
            context: "histogram feature names",
            expected: d,
            actual: names.len(),
        });
    }
    let mut out = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let values: Vec<f64> = records
            .iter()
            .flat_map(|r| {
                let mask = r.usable_mask(use_post);
                (0..r.x.nrows()).filter(move |&t| mask[t]).map(move |t| r.x[[t, k]])
            })
            .filter(|v| v.is_finite())
            .collect();
        let top = values.iter().copied().fold(SYMPTOM_MAX, f64::max).ceil().max(1.0) as usize;
        let mut counts = vec![0usize; top];
        for v in values {
            let bin = (v.max(0.0).floor() as usize).min(top - 1);
            counts[bin] += 1;
        }
        out.extend(counts.into_iter().enumerate().map(|(b, count)| HistogramRow {
            feature: name.clone(),
            bin_lower: b as f64,
            bin_upper: (b + 1) as f64,
            count,
        }));
    }
    Ok(out)
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, std::fs::File)> {
    let path = dir.join(name);
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok((path, file))
}

/// Writes the summary and per-fold tables, plot-ready RMSE series and the
/// score histogram into `dir`; returns the files written.
pub fn emit_report(dir: &Path, result: &ProtocolResult, histogram: &[HistogramRow]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let (path, file) = create(dir, METRICS_FILE)?;
    write_metric_table(&result.table, file)?;
    written.push(path);

    let (path, file) = create(dir, FOLD_METRICS_FILE)?;
    write_fold_rows(&result.folds, file)?;
    written.push(path);

    let rmse_rows = || result.table.rows.iter().filter(|r| r.key.metric == Metric::Rmse);
    let (path, file) = create(dir, RMSE_BY_STEP_FILE)?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["model", "protocol", "step", "horizon", "mean", "std"])?;
    for r in rmse_rows().filter(|r| r.key.feature == ALL_FEATURES) {
        let k = &r.key;
        w.write_record([
            k.model.clone(),
            k.protocol.to_string(),
            k.step.to_string(),
            k.horizon.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let (path, file) = create(dir, RMSE_BY_FEATURE_FILE)?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["model", "protocol", "step", "horizon", "feature", "mean", "std"])?;
    for r in rmse_rows().filter(|r| r.key.feature != ALL_FEATURES) {
        let k = &r.key;
        w.write_record([
            k.model.clone(),
            k.protocol.to_string(),
            k.step.to_string(),
            k.horizon.to_string(),
            k.feature.clone(),
            r.mean.to_string(),
            r.std.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let (path, file) = create(dir, HISTOGRAM_FILE)?;
    let mut w = csv::Writer::from_writer(file);
    for row in histogram {
        w.serialize(row)?;
    }
    if histogram.is_empty() {
        w.write_record(["feature", "bin_lower", "bin_upper", "count"])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
