use thiserror::Error;

/// Library-wide error type.
///
/// Variants are grouped so the CLI can map them onto its stable exit-code
/// contract: validation-class errors exit 1, numeric-class errors exit 2,
/// i/o errors exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    /// Exit code for the CLI contract: 1 validation, 2 numeric, 3 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Dimension(_)
            | Error::Parse { .. }
            | Error::InsufficientHistory(_)
            | Error::Infeasible(_) => 1,
            Error::Numeric(_) | Error::Domain(_) => 2,
            Error::Io { .. } => 3,
        }
    }

    /// Wraps an I/O error with the path it occurred on.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
