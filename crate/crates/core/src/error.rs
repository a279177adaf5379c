use std::path::PathBuf;

use datamix_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("weight {index} is negative ({value})")]
    NegativeWeight { index: usize, value: f64 },
    #[error("weights sum to {sum}, not 1")]
    SumNotOne { sum: f64 },
    #[error("all counts are zero")]
    EmptySample,
    #[error("invalid target-field empirical distribution: {0}")]
    InvalidEmpirical(String),
    #[error("invalid domain space: {0}")]
    InvalidSpace(String),

    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error("top-k threshold {k} exceeds {len} candidates")]
    KTooLarge { k: usize, len: usize },
    #[error("invalid sampler config: {0}")]
    SamplerConfig(String),

    #[error("invalid corpus spec: {0}")]
    SpecInvalid(String),
    #[error("target pool of domain {domain} exhausted after {drawn} sequences")]
    ExhaustedPool { domain: String, drawn: usize },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("feedback history is empty")]
    EmptyHistory,
    #[error("trajectory {0} has no feedback")]
    MissingFeedback(usize),

    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("transition batch is empty")]
    EmptyBatch,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("design matrix is rank deficient")]
    DegenerateDesign,
    #[error("invalid checkpoint: {0}")]
    CheckpointInvalid(String),

    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::SamplerConfig(_) | Error::SpecInvalid(_) | Error::InvalidSpace(_) => 2,
            Error::Numeric(_) | Error::DegenerateDesign => 4,
            Error::Nn(NnError::NonFinite(_)) => 4,
            _ => 3,
        }
    }
}
