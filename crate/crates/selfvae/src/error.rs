//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An API contract was violated (e.g. backward on a non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    /// Input values outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or inconsistent run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or mismatched checkpoint data.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset ingestion failure with per-item detail.
    #[error("data error: {0}")]
    Data(String),

    /// Training aborted (NaN loss guard).
    #[error("training aborted: {0}")]
    Train(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
