//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown layer: {0}")]
    Lookup(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("name conflict: {0}")]
    Conflict(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("bad adapter file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
