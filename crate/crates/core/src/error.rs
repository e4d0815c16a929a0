use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("label {label} out of range (class universe has {classes} classes)")]
    LabelRange { label: usize, classes: usize },

    #[error("batch too small for {op}: need at least {min} rows, got {got}")]
    BatchSize { op: &'static str, min: usize, got: usize },

    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("instance too large: {0}")]
    Size(String),

    #[error("optimizer fault: {0}")]
    OptimizerFault(String),

    #[error("training diverged at {stage} step {step}: {detail}")]
    Divergence { stage: String, step: usize, detail: String },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("invalid dataset spec: {0}")]
    Spec(String),

    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },

    #[error("schema error in {path}: {detail}")]
    Schema { path: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
