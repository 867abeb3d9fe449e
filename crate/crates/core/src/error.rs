use thiserror::Error;

/// Parse failures for the binary video and checkpoint formats.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("dimension overflow")]
    DimensionOverflow,
    #[error("trailing bytes after payload")]
    TrailingBytes,
    #[error("malformed section: {0}")]
    Section(String),
}

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its invariant; `field` names it.
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] tensorad::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u16),
    #[error("non-finite loss at step {step}; reproduce with batch seed {batch_seed:#018x}: {source}")]
    NonFiniteLoss {
        step: usize,
        batch_seed: u64,
        #[source]
        source: tensorad::Error,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
