use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] diffcore::DiffError),

    #[error("{0}")]
    Invalid(String),

    #[error("fusion stage {stage}: {msg}")]
    Stage { stage: usize, msg: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("non-finite {component} loss")]
    NonFiniteLoss { component: &'static str },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("unknown split `{0}` in manifest")]
    UnknownSplit(String),

    #[error("checkpoint tensor `{name}`: {msg}")]
    Checkpoint { name: String, msg: String },

    #[error("checkpoint config hash {found} does not match model hash {expected}")]
    ConfigHash { expected: String, found: String },

    #[error("no path found within {0} iterations")]
    NoPath(usize),

    #[error("dataset is empty")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
