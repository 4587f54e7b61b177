use thiserror::Error;

/// Errors produced by the synthesis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("degenerate embedding row {row}: zero norm after averaging")]
    DegenerateRow { row: usize },

    #[error("embedding provider failed for batches {batches:?}: {message}")]
    Provider { batches: Vec<usize>, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("generation failed for slots {slots:?}: {message}")]
    Generation { slots: Vec<usize>, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// True for failures caused by a remote model or embedding service.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::Provider { .. } | Error::Protocol(_) | Error::Backend(_) | Error::Generation { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
