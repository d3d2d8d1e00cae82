use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("constant series: standard deviation {std:e} is below {min:e}")]
    ConstantSeries { std: f64, min: f64 },

    #[error("need at least {needed} normal, non-missing points to standardize, found {found}")]
    TooFewPoints { needed: usize, found: usize },

    #[error("non-uniform timestamp interval at row {row}: {detail}")]
    IrregularInterval { row: usize, detail: String },

    #[error("series of length {len} is shorter than the window size {window}")]
    SeriesTooShort { len: usize, window: usize },

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no usable training windows: {0}")]
    NoTrainingWindows(String),

    #[error("smoothness is undefined: every consecutive pair touches a missing point")]
    NoObservedPairs,

    #[error("AUC is undefined without anomaly points among the evaluable points")]
    NoAnomalies,

    #[error("line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
