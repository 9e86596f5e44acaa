//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by any public operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operands have incompatible shapes or lengths.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input is mathematically degenerate (e.g. two zero vectors).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A NaN or infinity was produced or supplied where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A configuration value violates its documented constraints.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The operation was called on data that does not support it.
    #[error("usage error: {0}")]
    Usage(String),

    /// An operation that requires data received none.
    #[error("empty input: {0}")]
    Empty(String),

    /// A data or checkpoint file has an unreadable header.
    #[error("{path}: malformed header: {msg}")]
    MalformedHeader { path: String, msg: String },

    /// The file declares a format version newer than this build understands.
    #[error("{path}: unsupported format version {found}; this build reads up to v{supported}")]
    UnsupportedVersion {
        path: String,
        found: u32,
        supported: u32,
    },

    /// A record carries a different number of values than the header promised.
    #[error("{path}:{line}: dimension mismatch: expected {expected} values, found {found}")]
    DimensionMismatch {
        path: String,
        line: usize,
        expected: usize,
        found: usize,
    },

    /// The file ended before all promised records were read.
    #[error("{path}: truncated: expected {expected} records, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },

    /// A field could not be parsed as its declared type.
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
