//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An input is mathematically degenerate for the requested operation
    /// (e.g. a constant image fed to a correlation loss).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("non-finite loss at epoch {epoch}, step {step} (suspect parameter group: {group})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        group: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic bytes (not a {expected} file)")]
    BadMagic { path: PathBuf, expected: String },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated payload, need {needed} bytes at offset {offset} but only {available} remain")]
    TruncatedPayload {
        path: PathBuf,
        offset: u64,
        needed: u64,
        available: u64,
    },

    #[error("{path}: count mismatch, manifest declares {declared} but payload holds {actual}")]
    CountMismatch {
        path: PathBuf,
        declared: u64,
        actual: u64,
    },

    #[error("{path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
