use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at node '{node}': {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value produced by node '{node}'")]
    NonFinite { node: String },

    #[error("graph input '{0}' is not bound")]
    Unbound(String),

    #[error("backward requested before forward")]
    NotEvaluated,

    #[error("zero-norm vector in cosine similarity (node '{node}', row {row})")]
    ZeroNorm { node: String, row: usize },

    #[error("input too short: {got} samples, need at least {min}")]
    InputTooShort { got: usize, min: usize },

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("no distractor available for masked step {0}")]
    NoDistractor(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid value for '{field}': {detail}")]
    Validation { field: String, detail: String },

    #[error("mask does not match parameters: {0}")]
    MaskMismatch(String),

    #[error("unknown language '{0}'")]
    UnknownLanguage(String),

    #[error("training diverged at step {step}; last finite metrics: {last_finite}")]
    Diverged { step: u64, last_finite: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    pub(crate) fn validation(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Validation { field: field.into(), detail: detail.into() }
    }

    /// The innermost error, past any stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
