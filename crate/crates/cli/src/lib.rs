//! Experiment runner: configs, repeated runs and result files.

pub mod config;
pub mod runner;

use fex_core::FexError;

pub use config::{validate_config, ExperimentSpec, Mode, Profile};
pub use runner::{run_experiment, summarize, ExperimentOutput, RunReport, SummaryRow};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("no candidate expression was found")]
    NoCandidate,
    #[error(transparent)]
    Core(FexError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("output error: {0}")]
    Output(String),
}

impl From<FexError> for CliError {
    fn from(e: FexError) -> Self {
        match e {
            FexError::NoCandidate => CliError::NoCandidate,
            FexError::Config(m) => CliError::Config(m),
            e => CliError::Core(e),
        }
    }
}

impl CliError {
    /// Process exit status: 2 for config errors, 3 when nothing was found.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::NoCandidate => 3,
            _ => 1,
        }
    }
}
