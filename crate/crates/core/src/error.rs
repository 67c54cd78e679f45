use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape mismatch, out-of-range
    /// timestep, non-scalar backward root, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration or dataset setup.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed binary input (IDX files, checkpoints).
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Run-config parse failure.
    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A loss or gradient became non-finite.
    #[error("numeric divergence at step {step}: {message}")]
    Divergence { step: usize, message: String },

    /// A file the command depends on does not exist.
    #[error("missing prerequisite: {}", .0.display())]
    MissingPrerequisite(PathBuf),

    /// Inconsistent inputs to report generation.
    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(format!($($arg)*))
    };
}

pub(crate) use config_err;
pub(crate) use contract;
