//! Pipeline commands behind the `flownovel` binary.

pub mod commands;
pub mod config;

use flownovel_core::Error;

pub use config::{ExperimentConfig, ModelKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    /// 1 usage or config, 2 data, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::TrainingDiverged { .. } | Error::Divergence { .. } | Error::NonFinite { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}
