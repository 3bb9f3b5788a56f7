use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {reason}")]
    Ingest { line: usize, reason: String },

    #[error("unknown entity `{0}`")]
    UnknownEntity(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("no attendable span (empty key/value matrix)")]
    EmptySpan,

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("generator failed after {latency_secs:.3}s: {detail}")]
    Generator { latency_secs: f64, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("unresolved entities: {0}")]
    Unresolved(String),

    #[error("missing upstream artifact {}", .0.display())]
    MissingArtifact(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
