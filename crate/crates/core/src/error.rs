use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("malformed graph: {0}")]
    MalformedGraph(String),
    #[error("empty graph")]
    EmptyGraph,
    #[error("unknown {kind} symbol `{symbol}`")]
    UnknownSymbol { kind: &'static str, symbol: String },
    #[error("sentence contains no objects")]
    NoObjects,
    #[error("graph cannot be expressed by the template grammar: {0}")]
    Inexpressible(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("checkpoint was written for configuration {found}, current configuration is {expected}")]
    CheckpointMismatch { expected: String, found: String },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("alignment parameters are untrained")]
    Untrained,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
