//! Crate-wide error type.
//!
//! Errors carry a coarse [`ErrorCategory`] so binaries can map failures to
//! stable exit codes without matching on every variant.

use thiserror::Error;

/// Coarse failure class, used by the CLI for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Invalid configuration or arguments.
    Config,
    /// Missing or malformed input data.
    Data,
    /// Training / numeric failure (non-finite values, degenerate folds).
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("manifest {path}:{line}: {msg}")]
    Manifest { path: String, line: usize, msg: String },

    #[error("record {record_id}: missing image file {path}")]
    MissingImage { record_id: String, path: String },

    #[error("record {record_id}: no label provided")]
    MissingLabel { record_id: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("label extraction for record {record_id} failed after {attempts} attempts: {last}")]
    ExtractionFailed { record_id: String, attempts: usize, last: String },

    #[error("ambiguous extractor response: {raw:?}")]
    AmbiguousResponse { raw: String },

    #[error("extractor transport: {0}")]
    Transport(String),

    #[error("mask has no foreground pixels")]
    NoForeground,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },

    #[error("wire protocol: {0}")]
    Protocol(String),

    #[error("io: {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Error {
    /// Which coarse class this error belongs to.
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            Config(_) => ErrorCategory::Config,
            Numeric(_) => ErrorCategory::Numeric,
            Manifest { .. } | MissingImage { .. } | MissingLabel { .. } | Data(_)
            | ExtractionFailed { .. } | AmbiguousResponse { .. } | Transport(_)
            | NoForeground | Checkpoint { .. } | Protocol(_) | Io { .. } => ErrorCategory::Data,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
