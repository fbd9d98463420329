//! Hierarchical token speech codec.
//!
//! Audio is analyzed into frame embeddings, quantized by a residual vector
//! quantizer into a grid of codes, and split into coarse layers (entropy coded
//! under a causal token model and transmitted) and fine layers (regenerated at
//! the receiver by a second token model).

pub mod config;
pub mod entropy;
pub mod error;
pub mod frontend;
pub mod pipeline;
pub mod probmodel;
pub mod rvq;
pub mod signals;
pub mod vad_metrics;

pub use config::CodecConfig;
pub use entropy::{decode_stream, encode_stream, Bitstream, Mode, QuantizedDistribution};
pub use error::{CodecError, Result};
pub use frontend::{analyze, synthesize, EmbeddingSequence, FrontendConfig, Waveform};
pub use probmodel::{ModelId, Role, StepDistribution, TokenModel};
pub use rvq::{Codebooks, TokenGrid};
