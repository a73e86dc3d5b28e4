use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("matrix is rank deficient (pivot ratio {ratio:.3e})")]
    RankDeficient { ratio: f64 },

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("lookup table needs at least one record")]
    EmptyRecords,

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("denoiser output norm {norm:.3e} is too small to normalize")]
    ZeroDirection { norm: f64 },

    #[error("schedule exhausted: {0}")]
    ScheduleExhausted(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
