use thiserror::Error;

/// Errors surfaced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(u8, u8),

    #[error("operation undefined for a single node (u == v)")]
    SameNode,

    #[error("node id {0} is not placed in a network of {1} nodes")]
    UnknownNode(u32, usize),

    #[error("record time {t} is not greater than the last recorded time {last}")]
    OutOfOrderTime { t: u64, last: u64 },

    #[error("empty input")]
    EmptyInput,

    #[error("state corruption: {0}")]
    StateCorruption(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown theorem or lemma name: {0}")]
    UnknownName(String),

    #[error("no qualifying far partner exists for node {0}; this would falsify the witness lemma")]
    NoWitness(u32),

    #[error("malformed trace line {line}: {reason}")]
    MalformedTrace { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
