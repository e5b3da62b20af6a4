use std::fmt;

/// One schema problem found in a dataset record.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct RecordIssue {
    /// The record's qid when one could be read, otherwise its array position.
    pub record: String,
    pub field: String,
    pub message: String,
}

impl fmt::Display for RecordIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: field `{}`: {}", self.record, self.field, self.message)
    }
}

/// Error type shared by the tensor core, model, metrics, and data layers.
#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor extents for an operation.
    Dim { op: &'static str, detail: String },
    /// A violated precondition (empty input, bad index, non-scalar loss...).
    Contract(String),
    /// A softmax row whose positions are all masked out.
    InvalidMask(String),
    /// Dataset records that failed schema validation.
    Validation(Vec<RecordIssue>),
    /// A malformed binary container, checkpoint, or config file.
    Format(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// True for contract/validation failures (as opposed to I/O or parse errors).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dim { .. } | Error::Contract(_) | Error::InvalidMask(_) | Error::Validation(_)
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim { op, detail } => write!(f, "{op}: dimension mismatch: {detail}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::InvalidMask(msg) => write!(f, "invalid mask: {msg}"),
            Error::Validation(issues) => {
                writeln!(f, "dataset validation failed ({} issue(s)):", issues.len())?;
                for issue in issues {
                    writeln!(f, "  {issue}")?;
                }
                Ok(())
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
