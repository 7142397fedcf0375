use ssseg_nn::TensorError;
use thiserror::Error;

/// Failures while building or running a network.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    /// The config asks for something the built pieces cannot provide.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

pub type ModelResult<T> = std::result::Result<T, ModelError>;
