use thiserror::Error;

/// Errors produced by the propagation, training, metric and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape, channel or location arguments outside the valid domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value appeared during a computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    /// A metric that has no value for the given inputs (e.g. HD95 of an empty mask).
    #[error("metric `{metric}` is undefined: {reason}")]
    UndefinedMetric { metric: &'static str, reason: String },

    #[error("malformed array file at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Training { .. } => "training",
            Error::UndefinedMetric { .. } => "undefined_metric",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
