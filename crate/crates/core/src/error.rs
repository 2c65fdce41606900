use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed IDX container (bad magic, truncated payload, wrong rank).
    #[error("format error: {0}")]
    Format(String),

    /// Two inputs that must agree do not (e.g. image and label counts).
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// Attempt to mutate a class prototype that has already been consolidated.
    #[error("cluster for class {class} of task {task} is frozen")]
    FrozenCluster { task: usize, class: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
