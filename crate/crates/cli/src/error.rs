//! Command errors and their process exit codes.

use intentgrasp_core::{AmbiguityError, DatasetError, IntentError, ModelError, PersistError, PlanError};
use thiserror::Error;

/// Failure of a command. The variant decides the exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, bad input values or content the core rejects.
    #[error("{0}")]
    Validation(String),
    /// Files that cannot be read or written.
    #[error("{0}")]
    Io(String),
    /// Reproduced values that disagree with the reference values.
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
            CliError::Mismatch(_) => 1,
        }
    }

    pub fn validation(msg: impl std::fmt::Display) -> Self {
        CliError::Validation(msg.to_string())
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        match e {
            PersistError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

macro_rules! validation_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Validation(e.to_string())
            }
        })*
    };
}

validation_from!(AmbiguityError, DatasetError, IntentError, ModelError, PlanError);
