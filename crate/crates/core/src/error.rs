use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the operation's domain (bad index, empty input, ...).
    #[error("input domain error: {0}")]
    InputDomain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// A non-finite or undefined value appeared during a computation.
    #[error("numeric error in {stage}: {detail}")]
    Numeric { stage: String, detail: String },

    #[error("template error: {0}")]
    Template(String),

    #[error("format error: {0}")]
    Format(String),

    /// Failure reported by an injected embedding provider.
    #[error("embedding provider error: {0}")]
    Provider(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn numeric(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
            detail: detail.into(),
        }
    }
}
