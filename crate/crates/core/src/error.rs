use thiserror::Error;

/// Unified error type for the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside its mathematical domain (e.g. time outside `[0, 1]`).
    #[error("domain error: {0}")]
    Domain(String),

    /// Mismatched dimensions between two values that must align.
    #[error("shape error: {0}")]
    Shape(String),

    /// An enumeration or buffer exceeded its configured cap.
    #[error("size error: {0}")]
    Size(String),

    /// A documented precondition of an operation was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Operation not defined for this schedule or mode.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Batch violates the single-modality training plan.
    #[error("plan violation: {0}")]
    PlanViolation(String),

    /// Two runs or traces cannot be compared.
    #[error("comparison error: {0}")]
    Comparison(String),

    /// Training diverged (non-finite loss).
    #[error("divergence: {0}")]
    Divergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
