use evdet::corpus::CorpusError;
use evdet::evaluation::EvaluationError;
use evdet::training::{CheckpointError, ConfigError, TrainError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or inputs; exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while running; exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EvaluationError> for CliError {
    fn from(e: EvaluationError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_)
            | TrainError::EmptySplit
            | TrainError::Validation(_)
            | TrainError::Verbalizer(_)
            | TrainError::Identification(_) => CliError::Validation(e.to_string()),
            TrainError::Divergence { .. } | TrainError::Localization(_) | TrainError::Encoder(_) => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}
