use thiserror::Error;

/// Errors surfaced by loaders, model construction, and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Corpus {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("malformed tag `{0}`")]
    Tag(String),
    #[error("knowledge file: {0}")]
    Knowledge(String),
    #[error("embedding file: {0}")]
    Embedding(String),
    #[error("contextual vectors: {0}")]
    CtxVectors(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("label space: {0}")]
    LabelSpace(String),
    #[error("{0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training: {0}")]
    Training(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
