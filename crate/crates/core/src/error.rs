use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed event record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("chain of length {len} cannot supply {needed} events")]
    InsufficientChain { len: usize, needed: usize },

    #[error("duplicate candidate event `{0}`")]
    DuplicateCandidate(String),

    #[error("cannot build an event graph from an empty chain list")]
    EmptyChainList,

    #[error("event graph carries no node embeddings")]
    MissingEmbeddings,

    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("softmax row {0} has every entry masked")]
    AllMaskedRow(usize),

    #[error("non-positive target probability at ({row}, {col})")]
    NonPositiveTarget { row: usize, col: usize },

    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,

    #[error("packed input needs {len} tokens, limit is {maxlen}")]
    OverLength { len: usize, maxlen: usize },

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("event {0} has an empty token span")]
    EmptySpan(usize),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("need at least 2 unmasked rows, got {0}")]
    TooFewRows(usize),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::ConfigInvalid(msg.into())
    }
}
