use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter store inconsistency: {0}")]
    Consistency(String),

    #[error("gradient oracle: {0}")]
    Oracle(String),

    #[error("dataset record `{record}`: {reason}")]
    Load { record: String, reason: String },

    #[error("split: {0}")]
    Split(String),

    #[error("label {0} is not a binary class")]
    Label(String),

    #[error("non-finite value in {part}")]
    NonFinite { part: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub(crate) fn load(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load {
            record: record.into(),
            reason: reason.into(),
        }
    }
}
