use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input contains a non-finite value at index {index}")]
    NonFiniteInput { index: usize },

    #[error("bitplane count {0} is outside 1..=64")]
    BadBitplaneCount(u32),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("short input: {0}")]
    ShortInput(String),

    #[error("empty input")]
    EmptyInput,

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("unknown method tag {0}")]
    UnknownMethodTag(u8),

    #[error("bad stream: {0}")]
    BadStream(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage {stage} of chunk {chunk} failed: {source}")]
    StageFailure {
        chunk: usize,
        stage: &'static str,
        source: Box<Error>,
    },

    #[error("tolerance {requested:e} unreachable; best achievable bound is {achieved:e}")]
    UnreachableTolerance { requested: f64, achieved: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for errors caused by malformed stored data rather than bad arguments.
    pub fn is_corruption(&self) -> bool {
        match self {
            Error::StageFailure { source, .. } => source.is_corruption(),
            e => matches!(
                e,
                Error::ShortInput(_) | Error::CorruptPayload(_) | Error::UnknownMethodTag(_) | Error::BadStream(_)
            ),
        }
    }

    /// The innermost error, looking through stage failures.
    pub fn root(&self) -> &Error {
        match self {
            Error::StageFailure { source, .. } => source.root(),
            e => e,
        }
    }
}
