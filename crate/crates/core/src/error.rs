use thiserror::Error;

/// Errors shared by every module of the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("valid padding collapses a {dim}-pixel axis below one pixel (filter half-width {half_width})")]
    SpatialCollapse { dim: usize, half_width: usize },

    #[error("negative variance {value:e} on a kernel diagonal (upstream tensor is not PSD)")]
    NegativeVariance { value: f64 },

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("invalid input set: {0}")]
    InvalidInput(String),

    #[error("cholesky factorization failed: non-positive pivot at row {pivot}")]
    CholeskyFailure { pivot: usize },

    #[error("regularization ladder exhausted after {rungs} rungs")]
    LadderExhausted { rungs: usize },

    #[error("track unavailable: {0}")]
    TrackUnavailable(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
