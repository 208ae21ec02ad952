//! Error type shared across the crate.
//!
//! Variants are grouped by how the CLI reports them: configuration problems,
//! bad input data, and numeric failures map to distinct process exit codes.

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or usage (bad flag value, unknown config key,
    /// inconsistent model description). CLI exit code 1.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data (unreadable file, bad PGM header,
    /// non-binary mask, mismatched shapes between paired tensors).
    /// CLI exit code 2.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure (non-finite loss or gradient, divergence, failed
    /// gradient check). CLI exit code 3.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// I/O failure, annotated with the path being accessed. CLI exit code 2.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw `io::Error`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
