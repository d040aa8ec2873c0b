//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    ParameterDomain { op: &'static str, msg: String },

    #[error("{engine} requires time-invariant factors; use the associative scan for time-varying input")]
    EngineCapability { engine: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {op} at step {detail}")]
    NonFinite { op: &'static str, detail: String },

    #[error("empty input for {0}")]
    EmptyInput(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
