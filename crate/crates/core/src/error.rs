use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range on axis {axis}: {index} >= {extent}")]
    Index { axis: usize, index: u64, extent: u64 },

    #[error("invalid selection: {0}")]
    Selection(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at byte {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("duplicate block for variable {var:?} from rank {rank}")]
    DuplicateBlock { var: String, rank: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("open error: {0}")]
    Open(String),

    #[error("step order error: session is at step {expected}, got {got}")]
    StepOrder { expected: u64, got: u64 },

    #[error("incomplete step {step}: {detail}")]
    IncompleteStep { step: u64, detail: String },

    #[error("corrupt block in subfile {subfile} at offset {offset}")]
    CorruptBlock { subfile: u32, offset: u64 },

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("writer stalled: {0}")]
    Stall(String),

    #[error("timed out: {0}")]
    Timeout(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("drain failure: {0}")]
    Drain(String),

    #[error("run failed: {0}")]
    RankFailure(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            position: e.column(),
            message: e.to_string(),
        }
    }
}
