use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::SensorId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate orientation: heading axis is near vertical (z = {0:.4})")]
    DegenerateOrientation(f64),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("label count mismatch: labels hold {labels} entries but the scan has {points} points")]
    CountMismatch { labels: usize, points: usize },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("sensor {sensor}: nearest frame is {gap:.3} s away (max {max_gap:.3} s)")]
    SyncGap {
        sensor: SensorId,
        gap: f64,
        max_gap: f64,
    },

    #[error("configuration: {0}")]
    Config(String),

    #[error("missing labels for frames {0:?}")]
    MissingLabels(Vec<usize>),

    #[error("invalid split anchors: {0}")]
    InvalidAnchor(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("scene validation: {0}")]
    SceneValidation(String),

    #[error("edit {index}: {reason}")]
    Edit { index: usize, reason: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
