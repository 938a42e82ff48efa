use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("group `{group}` element {element} has zero variance")]
    DegenerateStd { group: String, element: usize },

    #[error("degenerate 6D rotation input: {0}")]
    DegenerateRotation(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("noise level must be positive, got {0}")]
    NonPositiveNoise(f64),

    #[error("weight count {got} does not match group count {expected}")]
    WeightCount { expected: usize, got: usize },

    #[error("all positions in the batch are masked")]
    AllMasked,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("insufficient samples: need {need}, have {have}")]
    InsufficientSamples { need: usize, have: usize },

    #[error("matrix is not positive semi-definite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
