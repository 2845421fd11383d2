use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no modes discovered")]
    NoModes,

    #[error("not a local maximum / indefinite Hessian (Cholesky failed at pivot {pivot})")]
    IndefiniteHessian { pivot: usize },

    #[error("covariance is not symmetric positive definite (Cholesky failed at pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite Hessian entries at {indices:?}")]
    NonFiniteHessian { indices: Vec<(usize, usize)> },

    #[error("unsupported base shape for CTRMD normaliser: {0}")]
    UnsupportedShape(String),

    #[error("unidentifiable system: normal matrix is singular")]
    Unidentifiable,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("rejection sampler envelope violated at x = {abscissa}")]
    EnvelopeViolation { abscissa: f64 },

    #[error("numerical failure at sweep {sweep}, level {level}: {message}")]
    Numerical {
        sweep: u64,
        level: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
