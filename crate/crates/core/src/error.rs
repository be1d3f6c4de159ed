use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("scans are not strictly increasing in time at position {index}")]
    UnsortedScans { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("non-finite value at position {index}")]
    NonFinite { index: usize },

    #[error("Box-Cox input must be positive after offset, got {value}")]
    NonPositiveShifted { value: f64 },

    #[error("requested {requested} components but at most {max} are available")]
    TooManyComponents { requested: usize, max: usize },

    #[error("query length {query} exceeds series length {series}")]
    QueryTooLong { query: usize, series: usize },

    #[error("query has zero variance; z-normalized profiles are undefined (use raw mode)")]
    ZeroVarianceQuery,

    #[error("not a scan container (bad magic)")]
    NotAScanContainer,

    #[error("not an embedding archive (bad magic)")]
    NotAnEmbeddingArchive,

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLengthMismatch { expected: u64, found: u64 },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("ranked lists do not share the same item universe")]
    MismatchedUniverse,

    #[error("archive too small: {0}")]
    ArchiveTooSmall(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
