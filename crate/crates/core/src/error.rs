use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("record `{id}`: {reason}")]
    Validation { id: String, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss in batch [{}]", .0.join(", "))]
    NonFiniteLoss(Vec<String>),

    #[error("time step {step} out of range {lo}..={hi}")]
    StepOutOfRange { step: usize, lo: usize, hi: usize },

    #[error("action sequence violates absorption: {0}")]
    AbsorptionViolation(String),

    #[error("malformed scenario `{name}`: {reason}")]
    MalformedScenario { name: String, reason: String },

    #[error("unknown target `{0}`")]
    UnknownTarget(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            id: id.into(),
            reason: reason.into(),
        }
    }
}
