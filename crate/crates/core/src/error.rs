use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("group size {0} is below the minimum of 2")]
    GroupTooSmall(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("selection size {n} outside [2, {available}]")]
    SelectionSize { n: usize, available: usize },

    #[error("enumeration oracle accepts at most {max} values, got {got}")]
    OracleTooLarge { got: usize, max: usize },

    #[error("token fraction {0} outside (0, 1]")]
    TokenFraction(f64),

    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("rollout for query {rollout} scored against instance {instance}")]
    QueryMismatch { instance: u64, rollout: u64 },

    #[error("modulus {modulus} outside [2, {available}] for this vocabulary")]
    Modulus { modulus: usize, available: usize },

    #[error("invalid pass@k arguments n={n}, c={c}, k={k}")]
    PassAtK { n: usize, c: usize, k: usize },

    #[error("smoothing factor {0} outside [0, 1)")]
    EmaAlpha(f64),

    #[error("invalid config `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
