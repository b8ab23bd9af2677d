//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image extents do not agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity reached an operation that requires finite input.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Tensor file format violation (magic, version, dtype, truncation).
    #[error("tensor file: {0}")]
    Format(#[from] FormatError),

    /// Model checkpoint does not match the requested configuration.
    #[error("checkpoint/config mismatch in field `{field}`: checkpoint has {checkpoint}, config has {config}")]
    CheckpointMismatch {
        field: String,
        checkpoint: String,
        config: String,
    },

    /// Training diverged (NaN/Inf loss).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Distinct failure modes when reading the toolkit tensor file format.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("magic mismatch: expected \"KMOE\", found {found:?}")]
    MagicMismatch { found: [u8; 4] },

    #[error("unsupported version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("dtype mismatch: file holds {found}, requested {requested}")]
    DtypeMismatch {
        found: &'static str,
        requested: &'static str,
    },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("invalid header: {0}")]
    BadHeader(String),
}

pub type Result<T> = std::result::Result<T, Error>;
