use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    ConfigFile { path: PathBuf, message: String },
    #[error("missing {what}; {hint}")]
    Missing { what: String, hint: String },
    #[error("stage {stage} requires {required}: run {required} first")]
    MissingStage { stage: &'static str, required: &'static str },
    #[error("stage {stage} depends on {required}, which was run with a different config: re-run {required}")]
    StaleStage { stage: &'static str, required: &'static str },
    #[error("stage {stage} already completed with a different config (hash {recorded}, now {current}); pass --force to redo it")]
    ConfigChanged {
        stage: &'static str,
        recorded: String,
        current: String,
    },
    #[error("run directory {0} is locked by another process (remove {0}/.lock if it is stale)")]
    Locked(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] lesionaug_core::Error),
    #[error(transparent)]
    Vtt(#[from] lesionaug_vtt::VttError),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(_) | CliError::ConfigFile { .. } => "invalid_config",
            CliError::Missing { .. } => "missing_input",
            CliError::MissingStage { .. } => "missing_stage",
            CliError::StaleStage { .. } => "stale_stage",
            CliError::ConfigChanged { .. } => "config_changed",
            CliError::Locked(_) => "run_dir_locked",
            CliError::Io { .. } => "io_error",
            CliError::Core(e) => e.code(),
            CliError::Vtt(e) => e.code(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "error": self.code(), "message": self.to_string() })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
