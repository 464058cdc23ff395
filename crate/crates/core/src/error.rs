use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Variants are grouped by the class of failure so that front ends can map
/// them onto distinct exit codes (see [`Error::class`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f32 },

    #[error("weight archive {path}: {kind}")]
    Archive { path: PathBuf, kind: ArchiveError },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("invalid json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// The distinct ways loading a weight archive can fail.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArchiveError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated archive (expected {expected} bytes, found {found})")]
    Truncated { expected: usize, found: usize },
    #[error("checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("architecture mismatch: archive holds {found}, expected {expected}")]
    SpecMismatch { expected: String, found: String },
    #[error("malformed header: {0}")]
    Header(String),
}

/// Coarse failure class, used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Io,
    Internal,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Json { .. } => ErrorClass::Config,
            Error::Shape(_) | Error::Degenerate(_) | Error::Data(_) | Error::Archive { .. } => ErrorClass::Data,
            Error::Io { .. } | Error::Decode { .. } => ErrorClass::Io,
            Error::State(_) | Error::Internal(_) | Error::NonFiniteLoss { .. } => {
                ErrorClass::Internal
            }
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
