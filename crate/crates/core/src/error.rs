use thiserror::Error;

/// Errors surfaced by plan construction, kernel propagation, and the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("invalid scaling constant: {0}")]
    InvalidConstant(String),

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("empty input batch")]
    EmptyBatch,

    #[error("kernel diagonal plus epsilon must be positive (entry {index}, value {value})")]
    NonpositiveDiagonal { index: usize, value: f64 },

    #[error("covariance factorization failed after PSD repair: {0}")]
    Factorization(String),

    #[error("attention moments missing or inconsistent: {0}")]
    MissingMoments(String),

    #[error("non-finite value in block `{block}`: {detail}")]
    NonFinite { block: String, detail: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
