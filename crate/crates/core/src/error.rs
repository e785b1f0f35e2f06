use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] numcore::NumError),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("retrieval needs at least one non-empty clue set")]
    NoClues,
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("sample `{0}` has no ground-truth slot in memory")]
    MissingGroundTruth(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
