//! Error type shared across the crate. `Config` maps to CLI exit code 1,
//! everything else to exit code 2.

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum Error {
    /// Invalid configuration, flag, or argument value.
    Config(String),
    /// Tensor/volume shape or dimension mismatch.
    Shape(String),
    /// I/O failure, with the path involved.
    Io { path: PathBuf, source: io::Error },
    /// Malformed on-disk data: bad magic, unsupported version, truncation,
    /// fingerprint mismatch.
    Format { path: PathBuf, detail: String },
    /// Numerical failure during training (non-finite loss or gradient).
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, detail: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), detail: detail.into() }
    }

    /// Exit code the CLI should report for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Io { path, source } => {
                write!(f, "i/o error on {}: {source}", path.display())
            }
            Error::Format { path, detail } => {
                write!(f, "format error in {}: {detail}", path.display())
            }
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
