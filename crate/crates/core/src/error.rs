//! Crate-wide error type and result alias.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the requested operation.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A forward or backward computation produced NaN or Inf.
    #[error("{op}: non-finite value (NaN/Inf) detected")]
    NonFinite { op: &'static str },

    /// A mathematical precondition was violated (log of non-positive
    /// input, zero-energy waveform, degenerate layer statistics, ...).
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("audio: {0}")]
    Audio(String),

    /// Manifest, label, transcript or enrollment-map problems.
    #[error("data: {0}")]
    Data(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Training loss went non-finite.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for data/numeric errors,
    /// 3 for divergence. Usage errors exit with 1 before reaching here.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) => 3,
            _ => 2,
        }
    }
}
