use thiserror::Error;

/// Errors produced anywhere in the filter stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape, or a shape is outside an operation's domain.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// User-supplied input failed validation (sizes, ranges, missing files, configs).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A binary or text artifact could not be decoded.
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    /// Divergence, degenerate fits and similar numerical breakdowns.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
