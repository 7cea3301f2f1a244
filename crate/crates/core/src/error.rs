use thiserror::Error;

/// Errors produced by the variational boosting library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite parameter value in {0}")]
    NonFiniteParameter(&'static str),

    #[error("inner {rank}x{rank} factorization failed (overflow in exp(log_diag)?)")]
    Factorization { rank: usize },

    #[error("covariance matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("invalid mixture weights: {0}")]
    InvalidWeights(String),

    #[error("mixing weight {0} outside [0, 1]")]
    InvalidMixingWeight(f64),

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("target density is non-finite at {point:?}")]
    NonFiniteTarget { point: Vec<f64> },

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("parameters became non-finite at step {step}")]
    Diverged { step: usize },

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("weighted EM failed: {0}")]
    EmFailure(String),

    #[error("quadrature grid too small: boundary mass fraction {fraction:e} exceeds 1e-8")]
    GridTooSmall { fraction: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error at line {line}: {message}")]
    Data { line: u64, message: String },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the index of the boosting stage that produced it.
    pub fn at_stage(self, stage: usize) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
