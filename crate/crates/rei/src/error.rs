//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReiError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ReiError>;

impl ReiError {
    pub fn shape(msg: impl Into<String>) -> Self {
        ReiError::ShapeMismatch(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        ReiError::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        ReiError::Config(msg.into())
    }
}
