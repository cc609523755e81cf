use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,

    #[error("out-of-vocabulary word: {0:?}")]
    OutOfVocabulary(String),

    #[error("token id {id} is outside the vocabulary (size {size})")]
    InvalidTokenId { id: u32, size: usize },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("noise level {0} is outside (0, 1]")]
    InvalidNoiseLevel(f64),

    #[error("invalid masking request: {0}")]
    InvalidMasking(String),

    #[error("sequence of length {len} exceeds the model maximum of {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint tensor {name:?} has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("prompt is already augmented")]
    AlreadyAugmented,

    #[error("decode configuration error: {0}")]
    DecodeConfig(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
