use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("backward already ran on this tape; reset it before calling backward again")]
    BackwardTwice,

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("budget unsatisfiable after {tries} tries; tightest violated cap: {cap}")]
    Budget { tries: usize, cap: String },

    #[error("malformed data at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("unknown layer `{name}`; available layers: {available}")]
    UnknownLayer { name: String, available: String },

    #[error("architecture description: {0}")]
    Architecture(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
