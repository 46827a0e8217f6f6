//! Error type shared by every module of the pipeline.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, VocaError>;

/// Errors produced by the animation pipeline.
#[derive(Debug, Error)]
pub enum VocaError {
    /// A container or file did not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// The file encoding is recognized but not supported.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// An argument violated an operation's preconditions.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// The input carried no usable content.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Not enough data to perform the operation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Inconsistent dataset contents.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid run or split configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric computation produced non-finite or singular results.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Underlying I/O failure.
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}
