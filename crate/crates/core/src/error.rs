use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SparkeError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch: {left}x{left} vs {right}x{right}")]
    ShapeMismatch { left: usize, right: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("cosine kernel is undefined for a zero vector")]
    ZeroVector,

    #[error("kernel bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),

    #[error("diagonal entry {index} is {value}, expected a strictly positive value")]
    NonPositiveDiagonal { index: usize, value: f64 },

    #[error("diagonal entry {index} is {value}, expected 1")]
    NonUnitDiagonal { index: usize, value: f64 },

    #[error("matrix is not positive semi-definite (smallest eigenvalue {min_eigenvalue})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("kernel matrix has zero trace")]
    ZeroTrace,

    #[error("entropy order must be positive and finite, got {0}")]
    InvalidOrder(f64),

    #[error("step {t} out of range 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("DDIM sigma {sigma} at step {t} exceeds bound {bound}")]
    SigmaBound { t: usize, sigma: f64, bound: f64 },

    #[error("stochastic DDIM step {t} requires a noise vector")]
    MissingNoise { t: usize },

    #[error("condition {0:?} does not match any mixture condition")]
    UnknownCondition(Vec<f64>),

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("history already holds {0} entries; reference points must be installed first")]
    HistoryNotFresh(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("eigendecomposition at n = {n} exceeds the configured cap of {cap}")]
    EigenCap { n: usize, cap: usize },

    #[error("io error: {0}")]
    Io(String),

    #[error("json error: {0}")]
    Json(String),

    #[error("csv error: {0}")]
    Csv(String),
}

impl From<std::io::Error> for SparkeError {
    fn from(e: std::io::Error) -> Self {
        SparkeError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for SparkeError {
    fn from(e: serde_json::Error) -> Self {
        SparkeError::Json(e.to_string())
    }
}

impl From<csv::Error> for SparkeError {
    fn from(e: csv::Error) -> Self {
        SparkeError::Csv(e.to_string())
    }
}

pub type Result<T, E = SparkeError> = std::result::Result<T, E>;
