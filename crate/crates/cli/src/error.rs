use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{}: {msg}", path.display())]
    Config { path: PathBuf, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checks failed: {0}")]
    ChecksFailed(String),

    #[error(transparent)]
    Core(#[from] paiconv_core::Error),

    #[error(transparent)]
    Bench(#[from] paiconv_bench::BenchError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 usage, 2 runtime, 3 check failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::ChecksFailed(_) => 3,
            _ => 2,
        }
    }
}
