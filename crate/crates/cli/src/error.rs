use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Config file does not match the schema; `path` is the JSON path.
    #[error("invalid config at `{path}`: {message}")]
    Validation { path: String, message: String },

    #[error("missing prerequisite: {what} not found at {}; run `corrsig {stage}` first", path.display())]
    MissingStage {
        stage: &'static str,
        what: String,
        path: PathBuf,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] corrsig::Error),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 validation, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation { .. } => 2,
            CliError::Core(corrsig::Error::Config(_)) => 2,
            CliError::Core(corrsig::Error::Training { .. }) => 4,
            _ => 3,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
