use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad parameters or configuration.
    Config,
    /// Input data violates a schema or invariant.
    Data,
    /// Overflow, NaN or another numerical breakdown.
    Numeric,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("sample `{id}`: rater score {score} is outside 1..=5")]
    ScoreOutOfRange { id: String, score: i64 },
    #[error("sample `{id}` has no rater scores")]
    EmptyScores { id: String },
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("unknown sample id `{0}`")]
    UnknownId(String),
    #[error("invalid label value {0}, expected 0 or 1")]
    InvalidLabel(i64),
    #[error("class {class} has {count} samples, at least {required} required")]
    TooFewSamples { class: &'static str, count: usize, required: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("negative distance {0}")]
    NegativeDistance(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("fold {fold}: sample `{id}` is in both the training and the test split")]
    FoldLeak { fold: usize, id: String },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) => ErrorKind::Config,
            Error::NonFinite(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
