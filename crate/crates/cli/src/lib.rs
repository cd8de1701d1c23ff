//! Experiment orchestration: staged, resumable runs from phantom data to the
//! baseline-versus-augmented comparison, plus the visual Turing test server.

pub mod app;
pub mod compare;
pub mod config;
pub mod error;
pub mod run;
pub mod stages;

pub use app::{execute, Cli, Command};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
