use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid length: {0}")]
    InvalidLength(String),
    #[error("degenerate protocol: need at least one bonafide and one spoof trial")]
    DegenerateProtocol,
    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate utterance id: {0}")]
    DuplicateId(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
