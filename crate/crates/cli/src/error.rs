use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] apnn_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },

    #[error("plot {path}: {message}")]
    Plot { path: PathBuf, message: String },

    #[error("experiment {name}: {source}")]
    Experiment { name: String, source: Box<AppError> },
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    pub fn csv(path: &Path, source: csv::Error) -> Self {
        AppError::Csv { path: path.into(), source }
    }

    pub fn in_experiment(self, name: &str) -> Self {
        AppError::Experiment { name: name.into(), source: Box::new(self) }
    }

    /// 2 for configuration or usage problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use apnn_core::Error as E;
        match self {
            AppError::Config(_) | AppError::Usage(_) => 2,
            AppError::Core(E::Numerical { .. } | E::Stability(_) | E::Diverged { .. }) => 3,
            AppError::Core(E::InvalidArgument(_) | E::EmptyData(_) | E::GridMismatch(_)) => 2,
            AppError::Experiment { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
