use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{malformed} of {total} lines malformed in {path} (lines {lines:?})")]
    TooManyMalformed {
        path: PathBuf,
        malformed: usize,
        total: usize,
        lines: Vec<usize>,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("span ({s}, {e}) out of range for length {len}")]
    SpanOutOfRange { s: usize, e: usize, len: usize },

    #[error("sequence of length {len} exceeds the {max} supported positions")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("corrupt file {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
