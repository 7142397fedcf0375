use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label {label} at flat position {position} is outside 0..{num_classes} and is not the ignore index")]
    LabelOutOfRange { label: u32, position: usize, num_classes: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
