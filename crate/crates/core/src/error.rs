use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("variable does not belong to this graph")]
    NotInGraph,

    #[error("label row {row} is not one-hot")]
    NotOneHot { row: usize },

    #[error("second-order meta-gradient requested for {params} parameters (cap {cap})")]
    SecondOrderCap { params: usize, cap: usize },

    #[error("clip of {len} samples is shorter than one frame ({frame} samples)")]
    ClipTooShort { len: usize, frame: usize },

    #[error("wav {path}: {reason}")]
    Wav { path: PathBuf, reason: String },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("insufficient clips: {0}")]
    InsufficientClips(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("report: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
