use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown quantifier `{0}`")]
    UnknownQuantifier(String),

    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },

    #[error("label `{0}` is not one of the task labels")]
    UnknownLabel(String),

    #[error("ordering comparison on non-numeric values in `{0}`")]
    TypeMismatch(String),

    #[error("cannot aggregate an empty list of logits")]
    EmptyAggregate,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("unknown curriculum `{0}`")]
    UnknownCurriculum(String),

    #[error("curriculum stage `{0}` matches no seen task")]
    EmptyStage(String),

    #[error("suite has no seen tasks")]
    NoSeenTasks,

    #[error("suite has no unseen tasks")]
    NoUnseenTasks,

    #[error("stratum {descriptor} has {count} task(s); at least 2 are needed to split")]
    StratumTooSmall { descriptor: String, count: usize },

    #[error("attention is disabled for this model")]
    AttentionDisabled,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint was produced from suite {checkpoint}, but the suite hash is {suite}")]
    HashMismatch { checkpoint: String, suite: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
