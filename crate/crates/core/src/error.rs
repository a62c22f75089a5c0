use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("endpoint unreachable after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("endpoint returned HTTP {status}: {body}")]
    Endpoint { status: u16, body: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("endpoint returned an empty description for {doc_id:?}")]
    EmptyDescription { doc_id: String },

    #[error("missing descriptions for {} document(s): {}", .0.len(), .0.join(", "))]
    MissingDescriptions(Vec<String>),

    #[error("missing embeddings for {} item(s); run `encode` first: {}", .0.len(), .0.join(", "))]
    MissingEmbeddings(Vec<String>),

    #[error("{path}: not a serval index (bad magic)")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported index format version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("{path}: truncated index file ({actual} bytes, need at least {needed})")]
    Truncated {
        path: PathBuf,
        actual: usize,
        needed: usize,
    },

    #[error("{path}: corrupt index: {message}")]
    CorruptIndex { path: PathBuf, message: String },

    #[error("no evaluable queries: {0}")]
    NoEvaluableQueries(String),
}

/// Coarse classification used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Upstream,
    Data,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Transport { .. }
            | Error::Endpoint { .. }
            | Error::Protocol(_)
            | Error::EmptyDescription { .. } => ErrorClass::Upstream,
            _ => ErrorClass::Data,
        }
    }

    /// Whether a request that failed this way may be re-issued.
    pub(crate) fn is_retryable(&self) -> bool {
        match self {
            Error::Transport { .. } => true,
            Error::Endpoint { status, .. } => *status == 429 || (500..600).contains(status),
            _ => false,
        }
    }
}
