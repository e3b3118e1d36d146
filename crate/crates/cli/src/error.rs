//! Command failures and their exit statuses.
//!
//! Status 1 covers anything the user can fix (bad config, missing or
//! malformed inputs, validation failures). Status 2 is reserved for faults
//! inside the toolkit.

use videor4_core::config::ConfigError;
use videor4_core::corpus::CorpusError;
use videor4_core::evidence::MatchError;
use videor4_core::grpo::checkpoint::CheckpointError;
use videor4_core::grpo::curriculum::CurriculumError;
use videor4_core::io::IoError;
use videor4_core::metrics::MetricError;
use videor4_core::qc::QcError;
use videor4_core::trajectory::{FillError, RenderError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError::Input(message.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

macro_rules! input_error {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Input(e.to_string())
            }
        })*
    };
}

input_error!(
    ConfigError,
    CorpusError,
    IoError,
    MatchError,
    MetricError,
    CheckpointError,
    RenderError,
    FillError
);

impl From<CurriculumError> for CliError {
    fn from(e: CurriculumError) -> Self {
        match e {
            CurriculumError::Grpo(_) | CurriculumError::Reward(_) | CurriculumError::Env(_) => {
                CliError::Internal(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<QcError> for CliError {
    fn from(e: QcError) -> Self {
        match e {
            QcError::Io { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}
