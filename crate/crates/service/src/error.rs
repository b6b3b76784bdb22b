use crate::protocol::ProtocolError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("timed out waiting for the server")]
    Timeout,
    #[error("{0}")]
    Protocol(#[from] ProtocolError),
    #[error("server error (status {status}): {message}")]
    Server { status: u8, message: String },
    #[error("response {got} does not answer request {expected}")]
    Correlation { expected: u64, got: u64 },
    #[error("unexpected {0} message")]
    Unexpected(&'static str),
    #[error(transparent)]
    Model(#[from] bsonet_model::ModelError),
    #[error(transparent)]
    Image(#[from] bsonet_core::Error),
    #[error("invalid server configuration: {0}")]
    Config(String),
}

impl ServiceError {
    /// Maps socket timeouts to [`ServiceError::Timeout`].
    pub(crate) fn from_io(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => ServiceError::Timeout,
            _ => ServiceError::Io(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, ServiceError>;
