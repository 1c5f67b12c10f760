//! Metrics, cross-validated protocols, random baselines and CSV reports.

mod metrics;
mod protocol;
mod report;
mod table;

pub use metrics::{classification_metrics, rmse, ClassificationMetrics, Confusion, PositiveClass, Rmse};
pub use protocol::{random_baseline, run_protocol, BaselineKind, BaselineSpec, EvalConfig};
pub use report::{
    emit_report, read_fold_rows, read_metric_table, score_histogram, write_fold_rows, write_metric_table,
    HistogramRow, FOLD_METRICS_FILE, HISTOGRAM_FILE, METRICS_FILE, RMSE_BY_FEATURE_FILE, RMSE_BY_STEP_FILE,
};
pub use table::{mean_std, FoldRow, Metric, MetricKey, MetricRow, MetricTable, Protocol, ProtocolResult, ALL_FEATURES};
