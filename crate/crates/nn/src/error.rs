use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid descriptor: {0}")]
    DescriptorInvalid(String),
    #[error("sequence of length {len} exceeds max context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("feature dimension {got} does not match descriptor input dim {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
