use std::path::PathBuf;

use semiseg_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("phantom generation failed for seed {seed}: {reason}")]
    Phantom { seed: u64, reason: String },
    #[error("organ missing: {0}")]
    OrganMissing(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("non-finite loss at iteration {iteration}; last good checkpoint: {last_checkpoint:?}")]
    Diverged {
        iteration: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Invalid(_) => "invalid",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Phantom { .. } => "phantom",
            Error::OrganMissing(_) => "organ_missing",
            Error::Config { .. } => "config",
            Error::Diverged { .. } => "diverged",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Nn(_) => "nn",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
