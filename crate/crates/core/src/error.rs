use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure carries the name of the offending field or tensor so the
/// CLI can emit a machine-parseable `error:<subcommand>:<field>:` prefix.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },

    #[error("{field}: expected dimension {expected}, got {actual}")]
    DimMismatch {
        field: String,
        expected: usize,
        actual: usize,
    },

    #[error("{field}: non-finite value at index {index}")]
    NonFinite { field: String, index: usize },

    #[error("{field}: malformed data: {message}")]
    Format { field: String, message: String },

    #[error("{field}: unknown identity `{id}`")]
    UnknownIdentity { field: String, id: String },

    #[error("{field}: training diverged: {message}")]
    Diverged { field: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{field}: {source}")]
    Json {
        field: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn dim(field: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimMismatch {
            field: field.into(),
            expected,
            actual,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Name of the field, tensor or path the error refers to.
    pub fn field(&self) -> String {
        match self {
            Error::Invalid { field, .. }
            | Error::DimMismatch { field, .. }
            | Error::NonFinite { field, .. }
            | Error::Format { field, .. }
            | Error::UnknownIdentity { field, .. }
            | Error::Diverged { field, .. }
            | Error::Json { field, .. } => field.clone(),
            Error::Io { path, .. } => path.display().to_string(),
        }
    }

    /// Prefixes the field path, e.g. `pixel(3,4)` + `head.sigma`.
    pub fn context(self, prefix: impl std::fmt::Display) -> Self {
        let join = |f: String| format!("{prefix}.{f}");
        match self {
            Error::Invalid { field, message } => Error::Invalid {
                field: join(field),
                message,
            },
            Error::DimMismatch {
                field,
                expected,
                actual,
            } => Error::DimMismatch {
                field: join(field),
                expected,
                actual,
            },
            Error::NonFinite { field, index } => Error::NonFinite {
                field: join(field),
                index,
            },
            Error::Format { field, message } => Error::Format {
                field: join(field),
                message,
            },
            Error::UnknownIdentity { field, id } => Error::UnknownIdentity {
                field: join(field),
                id,
            },
            Error::Diverged { field, message } => Error::Diverged {
                field: join(field),
                message,
            },
            Error::Json { field, source } => Error::Json {
                field: join(field),
                source,
            },
            io @ Error::Io { .. } => io,
        }
    }
}

pub(crate) fn ensure_finite(field: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            field: field.to_string(),
            index,
        }),
        None => Ok(()),
    }
}
