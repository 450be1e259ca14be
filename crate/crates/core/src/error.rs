use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes surfaced by the library. The CLI maps them onto exit
/// codes via [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate batch: batch-norm statistics need more than one value per channel")]
    DegenerateBatch,

    #[error("configuration error in {location}: {reason}")]
    Config { location: String, reason: String },

    #[error("no body foreground found in volume")]
    NoBody,

    #[error("no signal: heatmap maximum {max} does not exceed floor {floor}")]
    NoSignal { max: f64, floor: f64 },

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },

    #[error("manifest row {row}: {reason}")]
    Manifest { row: usize, reason: String },

    #[error("landmarks required: {0}")]
    LandmarkRequired(String),

    #[error("resample error: {0}")]
    Resample(String),

    #[error("sizing error: {0}")]
    Sizing(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse grouping used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Io,
    Numerical,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. } => ErrorCategory::Io,
            Error::Numerical(_) => ErrorCategory::Numerical,
            _ => ErrorCategory::Validation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
