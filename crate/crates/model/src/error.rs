use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Image(#[from] bsonet_core::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match expected {expected:?}")]
    Shape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint was produced for a different model configuration")]
    FingerprintMismatch,
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged {
        epoch: usize,
        loss: f64,
        /// Best checkpoint seen before divergence, if any epoch completed.
        last_good: Option<Box<crate::checkpoint::Checkpoint>>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub(crate) fn config_err(msg: impl Into<String>) -> ModelError {
    ModelError::Config(msg.into())
}
