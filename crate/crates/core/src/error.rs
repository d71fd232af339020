use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Weights(#[from] WeightsError),

    #[error("image data: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Whether the failure is numeric (non-finite values) rather than a data or usage problem.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

/// Failures while reading a weights file. Each variant carries a distinct
/// numeric code so tools can report corruption precisely.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WeightsError {
    #[error("not a weights file (bad magic line)")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed manifest at line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("configuration mismatch for key `{key}`: file has `{file}`, model has `{model}`")]
    ConfigMismatch {
        key: String,
        file: String,
        model: String,
    },
    #[error("shape mismatch for `{name}`: file {file:?}, model {model:?}")]
    ShapeMismatch {
        name: String,
        file: Vec<usize>,
        model: Vec<usize>,
    },
    #[error("parameter `{0}` missing from file")]
    MissingParam(String),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("payload checksum mismatch")]
    Checksum,
}

impl WeightsError {
    pub fn code(&self) -> u32 {
        match self {
            WeightsError::BadMagic => 10,
            WeightsError::Version { .. } => 11,
            WeightsError::Manifest { .. } => 12,
            WeightsError::ConfigMismatch { .. } => 13,
            WeightsError::ShapeMismatch { .. } => 14,
            WeightsError::MissingParam(_) => 15,
            WeightsError::Truncated { .. } => 16,
            WeightsError::Checksum => 17,
        }
    }
}
