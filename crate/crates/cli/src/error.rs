use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unparseable, incomplete or out-of-range configuration.
    #[error("config error: {0}")]
    Config(String),
    /// A checkpoint or snapshot that is absent, unreadable or stale.
    #[error("missing artifact: {0}")]
    Missing(String),
    /// A check the command exists to run did not pass.
    #[error("check failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] iclmb_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 0 ok, 1 test failure or runtime error, 2 config error, 3 missing
    /// artifact.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(iclmb_core::Error::Config { .. }) => 2,
            CliError::Missing(_) | CliError::Core(iclmb_core::Error::Checkpoint(_)) => 3,
            _ => 1,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Config(m) => m.clone(),
            other => other.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

pub type CliResult<T> = Result<T, CliError>;
