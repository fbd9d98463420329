//! Invertible analysis/synthesis front end.
//!
//! Stands in for a learned convolutional encoder/decoder pair. Audio is cut
//! into 50% overlapping sine-windowed blocks of `2 * hop` samples and mapped
//! through an orthonormal MDCT, giving `hop` real coefficients per frame.
//! Overlap-add of the inverse transform cancels the time-domain aliasing, so
//! everything except the final half block is reconstructed exactly.
//!
//! Frame `n` covers input samples `[n*hop - hop, n*hop + hop)`; the first half
//! of frame 0 reads zero padding. Frame `n` is therefore available as soon as
//! `(n + 1) * hop` samples have arrived.

mod mdct;
pub mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{CodecError, Result};
pub use mdct::Mdct;
pub use wav::{read_wav, write_wav};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_HOP: usize = 320;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    /// Builds a waveform, rejecting non-finite samples and clamping the rest
    /// into `[-1, 1]`.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(CodecError::InvalidConfig(
                "sample rate must be positive".into(),
            ));
        }
        let mut samples = samples;
        for (index, s) in samples.iter_mut().enumerate() {
            if !s.is_finite() {
                return Err(CodecError::InvalidSample { index });
            }
            *s = s.clamp(-1.0, 1.0);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    /// Samples per frame.
    pub hop: usize,
    /// Analysis window length, always `2 * hop`.
    pub window: usize,
    /// Coefficients per frame; the MDCT yields exactly `hop`.
    pub embed_dim: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self::with_hop(DEFAULT_SAMPLE_RATE, DEFAULT_HOP)
    }
}

impl FrontendConfig {
    pub fn with_hop(sample_rate: u32, hop: usize) -> Self {
        Self {
            sample_rate,
            hop,
            window: 2 * hop,
            embed_dim: hop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.sample_rate == 0 {
            return Err(CodecError::InvalidConfig(
                "hop and sample rate must be positive".into(),
            ));
        }
        if self.window != 2 * self.hop {
            return Err(CodecError::InvalidConfig(format!(
                "window {} must be twice the hop {}",
                self.window, self.hop
            )));
        }
        if self.embed_dim != self.hop {
            return Err(CodecError::InvalidConfig(format!(
                "MDCT front end produces {} coefficients, embed_dim is {}",
                self.hop, self.embed_dim
            )));
        }
        if self.sample_rate as usize % self.hop != 0 {
            return Err(CodecError::InvalidConfig(format!(
                "hop {} does not divide sample rate {}",
                self.hop, self.sample_rate
            )));
        }
        Ok(())
    }

    /// Frames per second.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }
}

/// Frame embeddings, row-major `n_frames x embed_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub frames: Vec<f32>,
    pub n_frames: usize,
    pub config: FrontendConfig,
}

impl EmbeddingSequence {
    pub fn new(frames: Vec<f32>, n_frames: usize, config: FrontendConfig) -> Result<Self> {
        if frames.len() != n_frames * config.embed_dim {
            return Err(CodecError::ShapeError(format!(
                "{} values for {n_frames} frames of dim {}",
                frames.len(),
                config.embed_dim
            )));
        }
        Ok(Self {
            frames,
            n_frames,
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn frame(&self, index: usize) -> &[f32] {
        let d = self.config.embed_dim;
        &self.frames[index * d..(index + 1) * d]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.frames.chunks_exact(self.config.embed_dim)
    }
}

fn check_rate(w: &Waveform, cfg: &FrontendConfig) -> Result<()> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(CodecError::UnsupportedAudio(format!(
            "sample rate {} Hz, front end expects {} Hz",
            w.sample_rate, cfg.sample_rate
        )));
    }
    Ok(())
}

/// Maps a waveform to one embedding per hop. Trailing samples that do not
/// fill a whole hop are dropped.
pub fn analyze(w: &Waveform, cfg: &FrontendConfig) -> Result<EmbeddingSequence> {
    check_rate(w, cfg)?;
    if w.is_empty() {
        return Err(CodecError::EmptyInput);
    }
    if let Some(index) = w.samples.iter().position(|s| !s.is_finite()) {
        return Err(CodecError::InvalidSample { index });
    }
    let mdct = Mdct::cached(cfg.hop);
    let hop = cfg.hop;
    let n_frames = w.len() / hop;
    let mut padded = vec![0.0f64; hop + n_frames * hop];
    for (dst, &s) in padded[hop..].iter_mut().zip(&w.samples) {
        *dst = s.clamp(-1.0, 1.0) as f64;
    }
    let mut frames = Vec::with_capacity(n_frames * hop);
    let mut coeffs = vec![0.0f64; hop];
    for f in 0..n_frames {
        mdct.forward(&padded[f * hop..f * hop + 2 * hop], &mut coeffs);
        frames.extend(coeffs.iter().map(|&c| c as f32));
    }
    EmbeddingSequence::new(frames, n_frames, *cfg)
}

/// Overlap-add inverse of [`analyze`]. Output holds `n_frames * hop` samples;
/// the last hop only receives half of its aliasing cancellation.
pub fn synthesize(e: &EmbeddingSequence) -> Result<Waveform> {
    e.config.validate()?;
    let mut synth = StreamingSynthesizer::new(e.config)?;
    let mut samples = Vec::with_capacity(e.n_frames * e.config.hop);
    for frame in e.iter() {
        samples.extend(synth.push_frame(frame)?);
    }
    samples.extend(synth.finish());
    Ok(Waveform {
        samples,
        sample_rate: e.config.sample_rate,
    })
}

/// Incremental [`analyze`]: emits frame `n` once `(n + 1) * hop` samples are in.
#[derive(Debug)]
pub struct StreamingAnalyzer {
    cfg: FrontendConfig,
    mdct: std::sync::Arc<Mdct>,
    buf: Vec<f64>,
    seen: usize,
}

impl StreamingAnalyzer {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            mdct: Mdct::cached(cfg.hop),
            buf: vec![0.0; cfg.hop],
            seen: 0,
        })
    }

    /// Feeds samples and returns every newly completed frame.
    pub fn push(&mut self, samples: &[f32]) -> Result<Vec<Vec<f32>>> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(CodecError::InvalidSample {
                index: self.seen + i,
            });
        }
        self.seen += samples.len();
        self.buf
            .extend(samples.iter().map(|&s| s.clamp(-1.0, 1.0) as f64));
        let hop = self.cfg.hop;
        let mut out = Vec::new();
        let mut coeffs = vec![0.0f64; hop];
        while self.buf.len() >= 2 * hop {
            self.mdct.forward(&self.buf[..2 * hop], &mut coeffs);
            out.push(coeffs.iter().map(|&c| c as f32).collect());
            self.buf.drain(..hop);
        }
        Ok(out)
    }
}

/// Incremental [`synthesize`]. After frame `n` is pushed, output block
/// `n - 1` is final and returned.
#[derive(Debug)]
pub struct StreamingSynthesizer {
    cfg: FrontendConfig,
    mdct: std::sync::Arc<Mdct>,
    /// Second half of the previous frame's windowed inverse transform.
    tail: Vec<f64>,
    frames: usize,
}

impl StreamingSynthesizer {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            mdct: Mdct::cached(cfg.hop),
            tail: vec![0.0; cfg.hop],
            frames: 0,
        })
    }

    pub fn push_frame(&mut self, frame: &[f32]) -> Result<Vec<f32>> {
        let hop = self.cfg.hop;
        if frame.len() != self.cfg.embed_dim {
            return Err(CodecError::ShapeError(format!(
                "frame has {} coefficients, expected {}",
                frame.len(),
                self.cfg.embed_dim
            )));
        }
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::ShapeError("non-finite embedding value".into()));
        }
        let coeffs: Vec<f64> = frame.iter().map(|&v| v as f64).collect();
        let mut block = vec![0.0f64; 2 * hop];
        self.mdct.inverse(&coeffs, &mut block);
        let first = self.frames > 0;
        self.frames += 1;
        let out: Vec<f32> = self
            .tail
            .iter()
            .zip(&block[..hop])
            .map(|(a, b)| to_sample(a + b))
            .collect();
        self.tail.copy_from_slice(&block[hop..]);
        // The first half of frame 0 lands on the leading zero padding.
        Ok(if first { out } else { Vec::new() })
    }

    /// Flushes the final, half-overlapped block.
    pub fn finish(self) -> Vec<f32> {
        if self.frames == 0 {
            return Vec::new();
        }
        self.tail.iter().map(|&v| to_sample(v)).collect()
    }
}

fn to_sample(v: f64) -> f32 {
    (v as f32).clamp(-1.0, 1.0)
}
