use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no valid entity records were ingested")]
    NoEntities,

    #[error("unknown entity id {0}")]
    UnknownEntity(usize),

    #[error("unknown relation id {0}")]
    UnknownRelation(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("span ({start}, {end}) out of range for {len} positions")]
    SpanOutOfRange { start: usize, end: usize, len: usize },

    #[error("entity index is empty")]
    EmptyIndex,

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {path}; run {producer} first")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
