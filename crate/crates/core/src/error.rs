use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// A caller violated an operation's contract (non-scalar loss,
    /// odd positional-encoding dimension, double backward, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward op produced NaN/Inf from finite inputs.
    #[error("non-finite value in {op}: {msg}")]
    NonFinite { op: &'static str, msg: String },

    /// Configuration failed validation before any work started.
    #[error("invalid config: {0}")]
    Config(String),

    /// A referenced file or video id does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// A file exists but its contents are inconsistent with its header
    /// or with sibling files.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A text file failed to parse.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
