use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {section}.{key}: {message}")]
    Config {
        section: String,
        key: String,
        message: String,
    },

    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error(transparent)]
    Engine(#[from] specdec::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Report(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(section: &str, key: &str, message: &str) -> Self {
        Self::Config {
            section: section.into(),
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn syntax(line: usize, message: &str) -> Self {
        Self::Syntax {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
