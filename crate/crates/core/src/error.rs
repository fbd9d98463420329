use std::io;

use crate::probmodel::ModelId;

/// Errors produced anywhere in the codec.
#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("input is empty")]
    EmptyInput,
    #[error("sample {index} is not finite")]
    InvalidSample { index: usize },
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("code {code} out of range for layer {layer} (codebook size {size})")]
    InvalidCode {
        layer: usize,
        code: u32,
        size: usize,
    },
    #[error("symbol {symbol} at position {index} out of range (alphabet size {size})")]
    InvalidSymbol {
        index: usize,
        symbol: u32,
        size: usize,
    },
    #[error("context error: {0}")]
    ContextError(String),
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },
    #[error("model mismatch: bitstream expects {expected}, got {found}")]
    ModelMismatch { expected: ModelId, found: ModelId },
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<hound::Error> for CodecError {
    fn from(err: hound::Error) -> Self {
        match err {
            hound::Error::IoError(e) => CodecError::Io(e),
            other => CodecError::UnsupportedAudio(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CodecError>;
