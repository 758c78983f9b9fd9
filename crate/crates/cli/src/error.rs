use std::process::ExitCode;

use thiserror::Error;

/// Command failures, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Training(String),
    #[error("{0}")]
    SweepFailed(String),
    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::Output(_) => 3,
            CliError::Training(_) => 4,
            CliError::SweepFailed(_) => 5,
        })
    }

    /// Maps a library error raised while loading or generating data.
    pub fn data(e: kanite::Error) -> Self {
        match e {
            kanite::Error::InvalidArgument(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }

    /// Maps a library error raised while training or evaluating.
    pub fn training(e: kanite::Error) -> Self {
        match e {
            kanite::Error::InvalidArgument(m) => CliError::Usage(m),
            e @ (kanite::Error::Schema(_) | kanite::Error::Treatment { .. }) => CliError::Data(e.to_string()),
            other => CliError::Training(other.to_string()),
        }
    }

    pub fn output(context: &str, e: impl std::fmt::Display) -> Self {
        CliError::Output(format!("{context}: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
