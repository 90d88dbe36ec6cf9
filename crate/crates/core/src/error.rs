//! Error taxonomy shared by every subsystem.
//!
//! All fallible public APIs return [`Result`]. Dimension mismatches are
//! detected eagerly at op boundaries (fail fast), non-finite values are
//! rejected the moment they are produced, and configuration problems are
//! reported before any work starts.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All errors produced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// A computation produced (or was handed) a non-finite value.
    #[error("non-finite value in {op}: {msg}")]
    NonFinite { op: &'static str, msg: String },

    /// Invalid configuration (rejected before running).
    #[error("config error: {0}")]
    Config(String),

    /// Cache used in a way its layout does not permit
    /// (e.g. appending shared state to a consumer layer's slot).
    #[error("cache state error: {0}")]
    CacheState(String),

    /// Malformed or truncated serialized artifact.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub(crate) fn non_finite(op: &'static str, msg: impl Into<String>) -> Self {
        Error::NonFinite { op, msg: msg.into() }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn cache(msg: impl Into<String>) -> Self {
        Error::CacheState(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
