use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: line {line}: {message}")]
    MalformedRow {
        file: String,
        line: u64,
        message: String,
    },

    #[error("interaction on line {line} references unknown patient {patient}")]
    UnknownPatient { patient: usize, line: u64 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("id out of range: {0}")]
    OutOfRange(String),

    #[error("non-finite loss in component `{component}` at epoch {epoch}")]
    Divergence { component: String, epoch: usize },

    #[error("checkpoint error at byte offset {offset}: {message}")]
    Checkpoint { offset: u64, message: String },

    #[error("checkpoint incompatible with requested model: {0}")]
    Incompatible(String),

    #[error("seeker {0} has no training interactions")]
    UnseenSeeker(usize),

    #[error("missing ground-truth sidecar in {0}")]
    MissingGroundTruth(PathBuf),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
