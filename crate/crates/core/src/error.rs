use std::path::PathBuf;

use crate::tensor_io::{HeadLocator, TensorKind};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("{path}: declared shape {shape:?} needs {expected} bytes, file has {actual}")]
    ShapeMismatch {
        path: PathBuf,
        shape: Vec<usize>,
        expected: u64,
        actual: u64,
    },

    #[error("no {kind} tensor for layer {} head {}", .head.layer, .head.head)]
    MissingEntry { head: HeadLocator, kind: TensorKind },

    #[error("non-finite value at query {query}, key {key}")]
    NonFinite { query: usize, key: usize },

    #[error("empty token span")]
    EmptySpan,

    #[error("empty sample")]
    EmptySample,

    #[error("token index {index} outside allowed range [{start}, {end})")]
    SpanOutOfBounds { index: usize, start: usize, end: usize },

    #[error("key {key} comes after query {query}, violating the causal mask")]
    CausalViolation { key: usize, query: usize },

    #[error("no causal (key <= query) pair between the spans")]
    NoCausalPair,

    #[error("query row {0} is not stored in this tensor")]
    RowNotStored(usize),

    #[error("every key up to query {0} is evicted")]
    EmptyKeptSet(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("layer {} head {}: {source}", .head.layer, .head.head)]
    AtHead {
        head: HeadLocator,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at(self, head: HeadLocator) -> Self {
        match self {
            e @ Error::AtHead { .. } => e,
            e => Error::AtHead {
                head,
                source: Box::new(e),
            },
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
