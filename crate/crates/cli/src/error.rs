use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    File { path: PathBuf, source: tokadapt::Error },

    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: String, source: Box<CliError> },

    #[error(transparent)]
    Core(#[from] tokadapt::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 1 usage, 2 data, 3 internal invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Stage { source, .. } => source.exit_code(),
            CliError::File { source, .. } | CliError::Core(source) => core_code(source),
        }
    }
}

fn core_code(e: &tokadapt::Error) -> i32 {
    if e.is_internal() {
        3
    } else if e.is_data_error() {
        2
    } else {
        1
    }
}

/// Attaches the offending path to a core error.
pub trait WithPath<T> {
    fn at(self, path: impl Into<PathBuf>) -> CliResult<T>;
}

impl<T> WithPath<T> for tokadapt::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> CliResult<T> {
        self.map_err(|source| CliError::File { path: path.into(), source })
    }
}
