use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("knowledge graph error: {0}")]
    Graph(String),
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("entity id {0} out of range")]
    EntityOutOfRange(usize),
    #[error("dialogue `{id}`: {msg}")]
    Dialogue { id: String, msg: String },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
