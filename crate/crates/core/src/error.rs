//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matmul dim mismatch: lhs {lhs:?} rhs {rhs:?}")]
    DimMismatch { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid convolution geometry: {0}")]
    InvalidGeometry(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("spatial dims must be powers of two for the transform, got {h}x{w}")]
    NonPowerOfTwo { h: usize, w: usize },

    #[error("zero-norm feature row {0}: similarity is undefined")]
    ZeroNormRow(usize),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
