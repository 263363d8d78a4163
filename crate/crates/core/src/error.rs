use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad parameters supplied by the caller.
    Usage,
    /// Malformed or inconsistent input data.
    Data,
    /// Remote embedding service failed.
    Service,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate asset id `{0}`")]
    DuplicateAssetId(String),
    #[error("asset `{0}` has no non-empty captions")]
    EmptyCaptions(String),
    #[error("asset `{0}` has an empty class label")]
    EmptyClassLabel(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },

    #[error("embedding table header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("embedding table body truncated: expected {expected} bytes, found {found}")]
    TruncatedBody { expected: usize, found: usize },
    #[error("duplicate embedding id `{0}`")]
    DuplicateId(String),
    #[error("non-finite value in vector `{0}`")]
    NonFinite(String),

    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("embedding service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("embedding service rejected request with status {status}: {message}")]
    ServiceRejected { status: u16, message: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no embedding for caption {0:?}")]
    MissingEmbedding(String),
    #[error("no cache path configured")]
    CacheNotConfigured,

    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("budget {budget} cannot be allocated across {classes} classes")]
    InfeasibleBudget { budget: usize, classes: usize },

    #[error("asset `{0}` has no valid captions")]
    NoValidCaptions(String),
    #[error("degenerate mean direction for `{0}`")]
    DegenerateMean(String),
    #[error("zero-length vector for `{0}`")]
    ZeroVector(String),

    #[error("class `{0}` is not present in the inventory")]
    UnknownClass(String),
    #[error("classes assigned to both base and novel: {0:?}")]
    OverlappingSplits(Vec<String>),
    #[error("asset `{0}` not found in base metadata")]
    UnresolvedAssetId(String),

    #[error("missing feature `{0}`")]
    MissingFeature(String),
    #[error("need at least 2 samples for moment estimation, got {0}")]
    TooFewSamples(usize),
    #[error("symmetric eigendecomposition did not converge")]
    EigDecompositionFailure,
    #[error("division by zero: reference value is 0")]
    DivisionByZero,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::ServiceUnavailable(_) | Error::ServiceRejected { .. } => ErrorKind::Service,
            Error::InvalidParams(_) | Error::CacheNotConfigured => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}
