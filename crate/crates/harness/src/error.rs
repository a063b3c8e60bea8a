use std::path::PathBuf;

/// Harness failures, grouped by the CLI exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing checkpoint {path} for scheme {scheme}")]
    MissingCheckpoint { scheme: String, path: PathBuf },
    #[error("numerical failure: {0}")]
    Numerical(#[from] lensmimo::Error),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::MissingCheckpoint { .. } => 3,
            HarnessError::Numerical(e) => match e {
                lensmimo::Error::InvalidConfig(_) | lensmimo::Error::TooLarge { .. } => 2,
                lensmimo::Error::Io(_) | lensmimo::Error::Json(_) | lensmimo::Error::Format(_) => 1,
                _ => 4,
            },
            HarnessError::Io { .. } | HarnessError::Csv(_) | HarnessError::Json(_) => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
