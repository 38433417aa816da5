use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank {rank} out of range for a {rows}x{cols} matrix")]
    Rank { rank: usize, rows: usize, cols: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("position {position} exceeds rope table of {max} positions")]
    PositionOverflow { position: usize, max: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("payload shorter than index: tensor `{name}` needs bytes up to {needed}, payload has {available}")]
    Truncated { name: String, needed: usize, available: usize },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<R, E = Error> = std::result::Result<R, E>;

pub(crate) fn shape_err<R>(msg: impl Into<String>) -> Result<R> {
    Err(Error::Shape(msg.into()))
}
