use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_OTHER: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("training diverged; partial results were written to {0}")]
    Diverged(PathBuf),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Other(_) => EXIT_OTHER,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn other(e: impl std::fmt::Display) -> CliError {
        CliError::Other(e.to_string())
    }
}

impl From<evssm::event_io::EventIoError> for CliError {
    fn from(e: evssm::event_io::EventIoError) -> Self {
        CliError::Other(e.to_string())
    }
}
