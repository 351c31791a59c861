use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dim {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: index out of range: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss([usize; 4]),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: u32, classes: usize },

    #[error("unknown block `{0}`")]
    UnknownBlock(String),

    #[error("integrity error in `{tensor}`: {detail}")]
    Integrity { tensor: String, detail: String },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: &'static str, expected: usize, got: usize) -> Self {
        Error::Dim {
            op,
            axis,
            expected,
            got,
        }
    }

    pub(crate) fn index(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Index {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dim { .. } => "dimension",
            Error::Index { .. } => "index",
            Error::Config(_) => "config",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::NonFinite { .. } => "non_finite",
            Error::Label { .. } => "label",
            Error::UnknownBlock(_) => "unknown_block",
            Error::Integrity { .. } => "integrity",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
