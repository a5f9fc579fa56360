//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by dataset loading, model construction, training,
/// attacks, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration value (unknown identifier, invalid hyperparameter).
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid argument to an operation (empty batch, out-of-range size).
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Tensor or layer shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),
    /// Index out of range (class labels, member indices).
    #[error("index error: {0}")]
    Index(String),
    /// Malformed file contents (bad magic, truncation, inconsistent counts).
    #[error("format error: {0}")]
    Format(String),
    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
