use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front ends to pick exit codes and HTTP statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid depth {0}: must be finite and positive")]
    InvalidDepth(f64),

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("degenerate point configuration: {0}")]
    Rank(String),

    #[error("registration failed: {0}")]
    Registration(String),

    #[error("misregistration: mean anchor residual {residual:.6} exceeds limit {limit:.6}")]
    Misregistration { residual: f64, limit: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("integrity check failed for {path}: expected sha256 {expected}, found {found}")]
    Integrity {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("count mismatch in {sequence} sequence: expected {expected} files, found {found}")]
    CountMismatch {
        sequence: String,
        expected: usize,
        found: usize,
    },

    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidDepth(_)
            | Error::Shape(_)
            | Error::EmptyInput(_)
            | Error::Config(_)
            | Error::InvalidCamera(_)
            | Error::CountMismatch { .. }
            | Error::Json { .. } => ErrorKind::Validation,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Format { .. }
            | Error::Integrity { .. } => ErrorKind::Io,
            Error::BehindCamera(_)
            | Error::Rank(_)
            | Error::Registration(_)
            | Error::Misregistration { .. }
            | Error::UndefinedMetric(_) => ErrorKind::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
