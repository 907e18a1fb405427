use std::path::PathBuf;

/// Errors produced anywhere in the affordance pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("memory is empty: {0}")]
    EmptyMemory(String),
    #[error("no correspondence: {0}")]
    NoCorrespondence(String),
    #[error("no valid surface point within {radius} px of ({u}, {v})")]
    NoSurface { u: i64, v: i64, radius: usize },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("test/memory leakage: scene {0} is present in the memory")]
    Leakage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at episode {episode}: {msg}")]
    NonFiniteLoss { episode: usize, msg: String },
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
