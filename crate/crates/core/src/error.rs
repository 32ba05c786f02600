use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed tensor archive: {0}")]
    ArchiveFormat(String),
    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("unknown token id {0}")]
    UnknownTokenId(u32),
    #[error("empty input")]
    EmptyInput,
    #[error("sequence of {len} tokens exceeds the context window of {n_ctx}")]
    ContextOverflow { len: usize, n_ctx: usize },
    #[error("index out of range: {0}")]
    Index(String),
    #[error("term decomposition does not reconstruct its target (max abs error {0:e})")]
    Decomposition(f64),
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("no target positions given")]
    EmptyTargets,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model `{0}` could not be located")]
    ModelNotFound(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }
}
