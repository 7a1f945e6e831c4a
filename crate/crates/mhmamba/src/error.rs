use thiserror::Error;

/// Unified error type for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor argument had the wrong shape. `context` names the operation
    /// and the offending argument, `detail` states expected vs. actual.
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: &'static str, detail: String },

    /// A configuration value violated an invariant (e.g. channels not
    /// divisible by the head count).
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A numeric guard tripped. `tensor` names the first tensor found to
    /// contain a non-finite value.
    #[error("non-finite value detected in {tensor}")]
    NonFinite { tensor: String },

    /// File format violation while reading a checkpoint or volume file.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { context, detail: detail.into() }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::InvalidConfig(detail.into())
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}
