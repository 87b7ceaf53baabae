use thiserror::Error;

/// Errors raised by every estimator and data operation in the crate.
///
/// Variants are grouped so that callers (the CLI in particular) can map them
/// onto a small set of exit codes: schema/data problems, numerical failures,
/// and caller contract violations.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates the expected schema. `tag` is a stable,
    /// machine-parseable identifier such as `SCHEMA_TREATMENT`.
    #[error("{tag}: {message}")]
    Schema { tag: &'static str, message: String },

    #[error("INGEST: {0}")]
    Ingestion(String),

    /// A precondition of an operation was not met by the caller.
    #[error("CONTRACT: {0}")]
    Contract(String),

    /// A numerical routine failed (singular system, factorization failure,
    /// non-finite values, exhausted retries).
    #[error("NUMERICAL: {0}")]
    Numerical(String),

    #[error("NONCONVERGENCE: {0}")]
    NonConvergence(String),

    #[error("IO: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn schema(tag: &'static str, message: impl Into<String>) -> Self {
        Error::Schema {
            tag,
            message: message.into(),
        }
    }

    pub(crate) fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical(message.into())
    }

    /// Stable tag for the error class, used in machine-readable diagnostics.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Schema { tag, .. } => tag,
            Error::Ingestion(_) => "INGEST",
            Error::Contract(_) => "CONTRACT",
            Error::Numerical(_) => "NUMERICAL",
            Error::NonConvergence(_) => "NONCONVERGENCE",
            Error::Io(_) => "IO",
            Error::Csv(_) => "CSV",
        }
    }

    /// True for failures that come from the data rather than from numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Schema { .. } | Error::Ingestion(_) | Error::Io(_) | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
