use bsonet_model::ModelError;
use bsonet_service::ServiceError;
use thiserror::Error;

/// A failure class with its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Protocol(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Protocol(_) => 4,
            CliError::Diverged(_) => 5,
            CliError::Failed(_) => 1,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{context}: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<bsonet_core::Error> for CliError {
    fn from(e: bsonet_core::Error) -> Self {
        use bsonet_core::Error as E;
        match e {
            E::Io(_) | E::UnsupportedFormat(_) | E::Truncated { .. } | E::Png(_) => {
                CliError::Io(e.to_string())
            }
            E::Config(_) | E::Dimensions { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Image(inner) => inner.into(),
            ModelError::Io(_) | ModelError::Checkpoint(_) | ModelError::FingerprintMismatch => {
                CliError::Io(e.to_string())
            }
            ModelError::Config(_) | ModelError::UnknownMethod(_) => CliError::Usage(e.to_string()),
            ModelError::Diverged { .. } => CliError::Diverged(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Model(inner) => inner.into(),
            ServiceError::Image(inner) => inner.into(),
            ServiceError::Io(_) => CliError::Io(e.to_string()),
            ServiceError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Protocol(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
