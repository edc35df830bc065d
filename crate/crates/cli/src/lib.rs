//! Configuration, orchestration, persistence and export for the `cbf` command.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod output;
pub mod verify;

use thiserror::Error;

pub use config::{ConfigError, RunConfig};

/// Exit code of every failure class; `0` is success.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("usage: {0}")]
    Usage(String),
    #[error("input: {0}")]
    Input(String),
    #[error("{kind}: {message}")]
    Numerical { kind: String, message: String },
    #[error("verification failed: {}", .0.join(", "))]
    Verify(Vec<String>),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Input(_) => 2,
            CliError::Numerical { .. } => 3,
            CliError::Verify(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<checkpoint::CheckpointError> for CliError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        match e {
            checkpoint::CheckpointError::Io(e) => CliError::Io(e),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<cbf_core::flow::FlowError> for CliError {
    fn from(e: cbf_core::flow::FlowError) -> Self {
        CliError::Numerical { kind: e.kind().to_string(), message: e.to_string() }
    }
}
