use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("attention size: sequence length {len} exceeds the cap of {cap}")]
    AttentionSize { len: usize, cap: usize },
    #[error("backward: {0}")]
    Backward(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
