//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or tensor shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid graph structure or node reference.
    #[error("graph error: {0}")]
    Graph(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid run or model configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Corrupt, truncated, or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged or produced non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
