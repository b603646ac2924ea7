//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or cardinality mismatch between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Semantically invalid input (out-of-bounds click, non-binary mask, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed serialized data; `offset` is the byte position of the defect.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Weight store does not satisfy the model manifest.
    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
