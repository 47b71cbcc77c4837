use std::path::PathBuf;

use crate::backend::BackendError;
use crate::constraints::ConstraintError;
use crate::engine::EngineError;
use crate::knowledge::KnowledgeError;
use crate::metrics::MetricsError;
use crate::prompt::PromptError;
use crate::schema::SchemaError;
use crate::tnm::TnmError;

/// Crate-level error. Everything except backend failures is an input
/// problem as far as the command line is concerned.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tnm(#[from] TnmError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
    #[error("backend failed for every case: {0}")]
    BackendFailed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for backend failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Backend(BackendError::Config(_)) => 1,
            Error::Backend(_) | Error::BackendFailed(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
