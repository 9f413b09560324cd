use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SimError {
    /// An argument fell outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid latency profile: {0}")]
    InvalidProfile(String),

    /// Every violated invariant is listed, one per entry.
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no feasible assignment: {0}")]
    NoFeasibleAssignment(String),

    #[error("inference set is empty")]
    EmptyInferenceSet,

    #[error("trainer failed: {0}")]
    Trainer(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl SimError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        SimError::Domain(msg.into())
    }

    /// True for errors caused by bad inputs (files, configs, profiles) as
    /// opposed to failures while computing.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            SimError::InvalidProfile(_)
                | SimError::Validation(_)
                | SimError::Config(_)
                | SimError::Io { .. }
                | SimError::Json(_)
                | SimError::Csv(_)
        )
    }
}
