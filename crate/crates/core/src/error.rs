use thiserror::Error;

use crate::scene::SceneError;
use crate::tensor::TensorError;

/// Errors raised by the encoder, refinement module, heads and training loop.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("a prompt takes 0 or 3 exemplars, got {0}")]
    ExemplarCount(usize),
    #[error("unknown prompt token {0:?}")]
    UnknownToken(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite {term} at step {step}")]
    NonFinite { term: &'static str, step: usize },
}
