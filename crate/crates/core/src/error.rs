use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the curriculum pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("I/O error: {0}")]
    Stream(#[from] std::io::Error),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty sequence")]
    EmptySequence,
    #[error(
        "metaset balance tolerance {tolerance} unachievable: best sentence deviation {sentence_deviation:.4}, best token deviation {token_deviation:.4}"
    )]
    Unbalanced {
        tolerance: f64,
        sentence_deviation: f64,
        token_deviation: f64,
    },
    #[error("token id {id} at position {position} is not decodable (vocab size {vocab_size})")]
    InvalidToken {
        id: u32,
        position: usize,
        vocab_size: usize,
    },
    #[error("metaset {0} is too small to train a teacher")]
    MetasetTooSmall(usize),
    #[error("difficulty table is missing sentence ids {0:?}")]
    MissingSentences(Vec<u32>),
    #[error("statistics error: {0}")]
    Stats(#[from] StatsError),
    #[error("item {item}: {message}")]
    Item { item: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

/// Failures of the statistics kernel.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("zero variance")]
    ZeroVariance,
    #[error("rank deficient design matrix: collinear columns {0:?}")]
    RankDeficient(Vec<usize>),
}
