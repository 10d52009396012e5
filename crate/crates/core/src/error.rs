use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range for size {size}")]
    OutOfRange { index: usize, size: usize },

    #[error("unknown word(s) not in vocabulary: {}", .0.join(", "))]
    UnknownWords(Vec<String>),

    #[error("unbalanced image markers at byte {position}: {reason}")]
    SpanParse { position: usize, reason: String },

    #[error("missing template field `{0}`")]
    MissingField(String),

    #[error("unknown template task `{0}`")]
    UnknownTask(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint array `{name}` is inconsistent: {reason}")]
    CheckpointShape { name: String, reason: String },

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
