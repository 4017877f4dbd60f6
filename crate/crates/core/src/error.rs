use std::fmt;

/// Failure kinds raised while decoding feature or checkpoint files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatError {
    BadMagic,
    UnsupportedVersion(u32),
    TruncatedPayload,
    LabelOutOfRange { index: usize, label: u32 },
    NonFiniteFeature { index: usize },
    Malformed,
}

impl FormatError {
    /// Stable numeric code used in diagnostics.
    pub fn code(&self) -> u32 {
        match self {
            FormatError::BadMagic => 10,
            FormatError::UnsupportedVersion(_) => 11,
            FormatError::TruncatedPayload => 12,
            FormatError::LabelOutOfRange { .. } => 13,
            FormatError::NonFiniteFeature { .. } => 14,
            FormatError::Malformed => 15,
        }
    }
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::BadMagic => write!(f, "bad magic"),
            FormatError::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            FormatError::TruncatedPayload => write!(f, "truncated payload"),
            FormatError::LabelOutOfRange { index, label } => {
                write!(f, "label {label} out of range at unit {index}")
            }
            FormatError::NonFiniteFeature { index } => {
                write!(f, "non-finite feature value at flat index {index}")
            }
            FormatError::Malformed => write!(f, "malformed record"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error (code {code}): {0}", code = .0.code())]
    Format(FormatError),
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<FormatError> for Error {
    fn from(e: FormatError) -> Self {
        Error::Format(e)
    }
}

impl Error {
    /// Process exit code: 2 usage, 3 validation, 4 runtime/numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Validation(_) | Error::Format(_) | Error::Dimension { .. } => 3,
            Error::Contract(_) | Error::NonFiniteGradient { .. } | Error::Io(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
