//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced a NaN or infinite value.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Invalid argument or configuration value.
    #[error("{0}")]
    Invalid(String),

    /// Dataset directory problems: missing pairs, empty groups.
    #[error("dataset error: {0}")]
    Data(String),

    /// Checkpoint container parse/validation failures.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Run-config file problems.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
