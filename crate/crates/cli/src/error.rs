use std::path::Path;
use std::process::ExitCode;

use thiserror::Error;

/// Failure classes, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing input `{path}`: {source}")]
    Missing {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("model: {0}")]
    Model(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn missing(path: &Path, source: std::io::Error) -> Self {
        CliError::Missing {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 3,
            CliError::Missing { .. } => 4,
            CliError::Data(_) => 5,
            CliError::Model(_) => 6,
            CliError::Io(_) => 7,
        })
    }
}

impl From<longiseg_core::Error> for CliError {
    fn from(e: longiseg_core::Error) -> Self {
        match e {
            longiseg_core::Error::Io(io) => CliError::Io(io),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<longiseg_model::ModelError> for CliError {
    fn from(e: longiseg_model::ModelError) -> Self {
        CliError::Model(e.to_string())
    }
}

impl From<longiseg_train::TrainError> for CliError {
    fn from(e: longiseg_train::TrainError) -> Self {
        use longiseg_train::TrainError as T;
        match e {
            T::Config(m) => CliError::Config(m),
            T::Model(m) => m.into(),
            T::Core(c) => c.into(),
            T::Io(io) => CliError::Io(io),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<longiseg_service::ServiceError> for CliError {
    fn from(e: longiseg_service::ServiceError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
