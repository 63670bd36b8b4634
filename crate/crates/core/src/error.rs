use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parse error at token {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error("unknown split `{0}` (expected simple, jump or around-right)")]
    UnknownSplit(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("example {0} has no tokens")]
    EmptyTokens(usize),
    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("{0}")]
    Eval(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::File { path, source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
