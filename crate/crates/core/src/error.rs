use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("task index {index} out of range (schedule has {available} incremental tasks)")]
    Range { index: usize, available: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label space: {0}")]
    LabelSpace(String),

    #[error("non-finite value in {0}")]
    Numeric(&'static str),

    #[error("sample {id} has no labeled foreground pixel")]
    NoForeground { id: u64 },

    #[error("domain error: {0}")]
    Domain(&'static str),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("metric undefined: every class has a zero IoU denominator")]
    UndefinedMetric,

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
