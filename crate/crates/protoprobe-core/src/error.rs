use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("vanished gradient (norm below 1e-12)")]
    VanishedGradient,

    #[error("degenerate feature vector: {0}")]
    DegenerateFeature(String),

    #[error("not a model file")]
    NotAModelFile,

    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("not an IDX file: {0}")]
    NotAnIdxFile(String),

    #[error("corrupt IDX: {0}")]
    CorruptIdx(String),

    #[error("model fingerprint mismatch: expected {expected}, got {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("no adversaries available: every attack failed")]
    NoAdversaries,

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
