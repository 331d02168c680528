use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("bad shape: {0}")]
    Shape(String),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("expression is not deterministic under a frozen seed ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("lexicon is not a bijection: {0}")]
    NotBijective(String),
    #[error("invalid alignment {targets:?} for source length {source_len}")]
    InvalidAlignment { targets: Vec<usize>, source_len: usize },
    #[error("no embedding for token id {0}")]
    MissingEmbedding(usize),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(
        "non-finite loss at step {step}: self={l_self} style={l_style} cycle={l_cycle} grad_norm={grad_norm}"
    )]
    NonFinite {
        step: usize,
        l_self: f64,
        l_style: f64,
        l_cycle: f64,
        grad_norm: f64,
    },
    #[error("degenerate data: {0}")]
    Degenerate(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
