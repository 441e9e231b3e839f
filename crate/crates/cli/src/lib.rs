//! Library side of the `dslq` binary: config loading, the experiment
//! commands and the reproducibility manifest. `main.rs` only parses
//! arguments and maps errors to exit codes.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod report;

use thiserror::Error;

pub use commands::{cmd_ensemble_study, cmd_run, cmd_synth, cmd_target, RunOutcome};
pub use config::{load_run_config, LoadedConfig, RunConfig};
pub use manifest::{verify_manifest, ArtifactWriter, ExperimentManifest};
pub use report::cmd_report;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config, arguments or inputs; nothing was computed.
    #[error("{0}")]
    Validation(String),
    /// Something failed while computing or writing.
    #[error("{0}")]
    Runtime(String),
    #[error("no summary rows found under {0}")]
    NoResults(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::NoResults(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub(crate) fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}
