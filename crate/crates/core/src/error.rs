use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode: {0}")]
    Image(String),

    #[error("unsupported bit depth: {0}")]
    UnsupportedBitDepth(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence has {have} frames, need at least {need}")]
    SequenceTooShort { have: usize, need: usize },

    #[error("propagated flow state is empty at t = {0}")]
    EmptyFlowState(usize),

    #[error("unknown modulation layer `{0}`")]
    UnknownLayer(String),

    #[error("coder desync: {0}")]
    CoderDesync(String),

    #[error("zero-width symbol interval for symbol {0}")]
    ZeroWidthSymbol(usize),

    #[error("bitstream: {0}")]
    Bitstream(String),

    #[error("no frames in bitstream")]
    NoFrames,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("metric: {0}")]
    Metric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
