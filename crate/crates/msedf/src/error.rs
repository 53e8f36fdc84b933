use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {}x{}, right is {}x{}", lhs.0, lhs.1, rhs.0, rhs.1)]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("{what}: index {index} out of range (length {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("loss tensor was not recorded on a tape")]
    NotOnTape,

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("image `{image_id}` not found in {stream} feature stream")]
    MissingImage { stream: String, image_id: String },

    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,

    #[error("requested {requested} neighbors but pool only has {available}")]
    InsufficientPool { requested: usize, available: usize },

    #[error("{what} at byte offset {offset}: {detail}")]
    Format {
        what: &'static str,
        offset: usize,
        detail: String,
    },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("unsupported {what} version {found} (expected {expected})")]
    VersionMismatch {
        what: &'static str,
        found: u8,
        expected: u8,
    },

    #[error("vocabulary mismatch: checkpoint hash {checkpoint:#018x}, dataset hash {dataset:#018x}")]
    VocabularyMismatch { checkpoint: u64, dataset: u64 },

    #[error("cross entropy over all-pad targets is undefined")]
    AllPadTargets,

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
