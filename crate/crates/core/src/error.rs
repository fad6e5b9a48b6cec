use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index}, jitter {jitter:e})")]
    NotPositiveDefinite { index: usize, pivot: f64, jitter: f64 },

    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {gap:e}")]
    NotSymmetric { i: usize, j: usize, gap: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("non-finite entry at flat index {0}")]
    NonFinite(usize),

    #[error("empty sequence")]
    EmptySequence,

    #[error("cache is empty")]
    EmptyCache,

    #[error("retained subset is empty")]
    EmptySubset,

    #[error("mean key is zero; cosine anchor undefined")]
    DegenerateAnchor,

    #[error("observation window holds no queries")]
    EmptyWindow,

    #[error("budget {budget} exceeds cache size {n}")]
    BudgetExceedsCache { budget: usize, n: usize },

    #[error("index {index} out of range for cache of size {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("duplicate index {0}")]
    DuplicateIndex(usize),

    #[error("policy {0} is not supported in streaming eviction")]
    PolicyUnsupportedInStreaming(String),

    #[error("policy {policy} needs observed queries ({needed} required, {available} available)")]
    MissingQueries {
        policy: String,
        needed: usize,
        available: usize,
    },

    #[error("{0} subsets exceeds the enumeration cap")]
    CombinatorialExplosion(u128),

    #[error("ranks are degenerate: {0} is constant")]
    DegenerateRanks(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    VersionUnsupported(u8),

    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
