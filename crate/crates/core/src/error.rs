use std::path::PathBuf;

use crate::scoring::Branch;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing field: {field} @ line {line}")]
    MissingField { field: &'static str, line: usize },

    #[error("malformed record @ line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("subtitle cue {cue}: {message}")]
    Subtitle { cue: usize, message: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("zero-norm feature vector at {0}")]
    ZeroNorm(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("knowledge base: {0}")]
    KnowledgeBase(String),

    #[error("scorer backend failed on {branch} candidate {candidate}{}: {message}", segment.map(|s| format!(" segment {s}")).unwrap_or_default())]
    Backend {
        branch: Branch,
        candidate: usize,
        segment: Option<usize>,
        message: String,
    },

    #[error("scorer protocol: {0}")]
    Protocol(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
