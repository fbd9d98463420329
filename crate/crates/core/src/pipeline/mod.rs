//! Sender and receiver.
//!
//! The sender analyzes audio, quantizes every frame through all layers and
//! entropy codes only the coarse layers. The receiver decodes the coarse
//! layers losslessly, regenerates the fine layers frame by frame with the fine
//! model, and synthesizes audio from the full grid. Without a fine model the
//! fine layers stay zero and only the coarse prefix is dequantized.

mod sampler;

pub use sampler::{Sampler, SamplerConfig, Strategy};

use crate::config::CodecConfig;
use crate::entropy::{
    check_stream_model, header_config, Bitstream, Mode, StreamDecoder, StreamEncoder,
};
use crate::error::{CodecError, Result};
use crate::frontend::{
    analyze, synthesize, FrontendConfig, StreamingAnalyzer, StreamingSynthesizer, Waveform,
};
use crate::probmodel::{flatten_coarse, unflatten_coarse, ModelSession, Role, TokenModel};
use crate::rvq::{dequantize, dequantize_grid, quantize, quantize_sequence, Codebooks, TokenGrid};

/// Front end matching a codec geometry at the given sample rate.
pub fn frontend_config(cfg: &CodecConfig, sample_rate: u32) -> FrontendConfig {
    FrontendConfig::with_hop(sample_rate, cfg.embed_dim)
}

/// Full token grid of a waveform.
pub fn tokenize(w: &Waveform, cb: &Codebooks, cfg: &CodecConfig) -> Result<TokenGrid> {
    quantize_sequence(&analyze(w, &frontend_config(cfg, w.sample_rate))?, cb, cfg)
}

/// Audio from the first `n_layers` layers of a grid.
pub fn render(
    g: &TokenGrid,
    cb: &Codebooks,
    n_layers: usize,
    sample_rate: u32,
) -> Result<Waveform> {
    synthesize(&dequantize_grid(
        g,
        cb,
        n_layers,
        frontend_config(g.config(), sample_rate),
    )?)
}

fn check_coarse_model(m: &TokenModel, cfg: &CodecConfig) -> Result<()> {
    if m.role() != Role::Coarse {
        return Err(CodecError::ContextError(format!(
            "expected a coarse model, got a {} model",
            m.role()
        )));
    }
    let mc = m.config();
    if mc.codebook_size != cfg.codebook_size || mc.n_coarse != cfg.n_coarse {
        return Err(CodecError::InvalidConfig(format!(
            "coarse model was trained for Nc={} N_C={}, codec uses Nc={} N_C={}",
            mc.codebook_size, mc.n_coarse, cfg.codebook_size, cfg.n_coarse
        )));
    }
    Ok(())
}

fn check_codebooks(cb: &Codebooks, cfg: &CodecConfig) -> Result<()> {
    if cb.codebook_size != cfg.codebook_size
        || cb.embed_dim != cfg.embed_dim
        || cb.n_layers() < cfg.n_layers()
    {
        return Err(CodecError::InvalidConfig(format!(
            "codebooks ({} layers of {} x {}) do not fit the codec geometry {cfg:?}",
            cb.n_layers(),
            cb.codebook_size,
            cb.embed_dim
        )));
    }
    Ok(())
}

fn stamp(b: &mut Bitstream, frames: usize, sample_rate: u32, cfg: &CodecConfig) {
    b.header.frame_count = frames as u32;
    b.header.sample_rate = sample_rate;
    b.header.hop = cfg.embed_dim as u16;
    b.header.n_fine = cfg.n_fine as u8;
}

/// Entropy codes the coarse layers of an already quantized grid.
pub fn encode_grid(
    g: &TokenGrid,
    coarse_model: &TokenModel,
    sample_rate: u32,
    mode: Mode,
) -> Result<Bitstream> {
    let cfg = g.config();
    check_coarse_model(coarse_model, cfg)?;
    let mut b = crate::entropy::encode_stream(&flatten_coarse(g), coarse_model, mode)?;
    stamp(&mut b, g.n_frames(), sample_rate, cfg);
    Ok(b)
}

/// Audio to bitstream. Only coarse layers enter the payload.
pub fn encode(
    w: &Waveform,
    cb: &Codebooks,
    coarse_model: &TokenModel,
    cfg: &CodecConfig,
    mode: Mode,
) -> Result<Bitstream> {
    cfg.validate()?;
    check_codebooks(cb, cfg)?;
    check_coarse_model(coarse_model, cfg)?;
    let g = tokenize(w, cb, cfg)?;
    encode_grid(&g, coarse_model, w.sample_rate, mode)
}

/// Fills fine layers one frame at a time from the fine model.
pub struct FineSynthesizer<'m> {
    session: ModelSession<'m>,
    sampler: Sampler,
    n_coarse: usize,
}

impl<'m> FineSynthesizer<'m> {
    pub fn new(fine_model: &'m TokenModel, cfg: &CodecConfig, s: SamplerConfig) -> Result<Self> {
        if fine_model.role() != Role::Fine {
            return Err(CodecError::ContextError(format!(
                "fine synthesis needs a fine model, got a {} model",
                fine_model.role()
            )));
        }
        let mc = fine_model.config();
        if mc.codebook_size != cfg.codebook_size
            || mc.n_coarse != cfg.n_coarse
            || mc.n_fine != cfg.n_fine
        {
            return Err(CodecError::ContextError(format!(
                "fine model geometry {mc:?} does not match stream geometry {cfg:?}"
            )));
        }
        s.validate(cfg.codebook_size)?;
        Ok(Self {
            session: fine_model.session(),
            sampler: Sampler::new(s),
            n_coarse: cfg.n_coarse,
        })
    }

    /// Overwrites the fine entries of `frame` (all layers) given its coarse
    /// entries and everything pushed before.
    pub fn fill(&mut self, frame: &mut [u32]) -> Result<()> {
        for layer in 0..frame.len() {
            if layer >= self.n_coarse {
                frame[layer] = self.sampler.draw(&self.session.distribution()?);
            }
            self.session.push(frame[layer])?;
        }
        Ok(())
    }
}

/// Regenerates layers `N_C+1..` of `coarse` in flattening order. Coarse
/// entries are left as they are.
pub fn sample_fine(
    coarse: &TokenGrid,
    fine_model: &TokenModel,
    s: SamplerConfig,
) -> Result<TokenGrid> {
    let cfg = *coarse.config();
    let mut out = coarse.clone();
    if cfg.n_fine == 0 {
        if fine_model.role() != Role::Fine {
            return Err(CodecError::ContextError(
                "fine synthesis needs a fine model".into(),
            ));
        }
        return Ok(out);
    }
    let mut synth = FineSynthesizer::new(fine_model, &cfg, s)?;
    let mut codes = out.codes().to_vec();
    for frame in codes.chunks_mut(cfg.n_layers()) {
        synth.fill(frame)?;
    }
    out = TokenGrid::new(codes, cfg)?;
    Ok(out)
}

fn check_fine_id(b: &Bitstream, fine_model: Option<&TokenModel>) -> Result<()> {
    if let Some(f) = fine_model {
        let want = b.header.fine_model_id;
        if !want.is_none() && want != f.model_id() {
            return Err(CodecError::ModelMismatch {
                expected: want,
                found: f.model_id(),
            });
        }
    }
    Ok(())
}

fn stream_geometry(b: &Bitstream, cb: &Codebooks) -> Result<(CodecConfig, FrontendConfig)> {
    let cfg = header_config(&b.header, cb.embed_dim)?;
    check_codebooks(cb, &cfg)?;
    let fcfg = FrontendConfig::with_hop(b.header.sample_rate, b.header.hop as usize);
    fcfg.validate()?;
    if fcfg.embed_dim != cb.embed_dim {
        return Err(CodecError::CorruptStream(format!(
            "header hop {} does not match codebook dimension {}",
            b.header.hop, cb.embed_dim
        )));
    }
    if b.header.symbol_count as u64 != b.header.frame_count as u64 * cfg.n_coarse as u64 {
        return Err(CodecError::CorruptStream(format!(
            "{} symbols cannot fill {} frames of {} coarse layers",
            b.header.symbol_count, b.header.frame_count, cfg.n_coarse
        )));
    }
    Ok((cfg, fcfg))
}

/// Bitstream to token grid and audio.
pub fn decode(
    b: &Bitstream,
    cb: &Codebooks,
    coarse_model: &TokenModel,
    fine_model: Option<&TokenModel>,
    s: SamplerConfig,
) -> Result<(TokenGrid, Waveform)> {
    check_stream_model(&b.header, coarse_model)?;
    check_fine_id(b, fine_model)?;
    let (cfg, _) = stream_geometry(b, cb)?;
    let symbols = crate::entropy::decode_stream(b, coarse_model)?;
    let coarse = unflatten_coarse(&symbols, &cfg)?;
    let (grid, layers) = match fine_model {
        Some(f) if cfg.n_fine > 0 => (sample_fine(&coarse, f, s)?, cfg.n_layers()),
        _ => (coarse, cfg.n_coarse),
    };
    let w = render(&grid, cb, layers, b.header.sample_rate)?;
    Ok((grid, w))
}

/// Frame-synchronous sender: feed samples, get coded frames.
pub struct StreamingEncoder<'a> {
    analyzer: StreamingAnalyzer,
    encoder: StreamEncoder<'a>,
    cb: &'a Codebooks,
    cfg: CodecConfig,
    sample_rate: u32,
    frames: usize,
}

impl<'a> StreamingEncoder<'a> {
    pub fn new(
        cb: &'a Codebooks,
        coarse_model: &'a TokenModel,
        cfg: &CodecConfig,
        sample_rate: u32,
        mode: Mode,
    ) -> Result<Self> {
        cfg.validate()?;
        check_codebooks(cb, cfg)?;
        check_coarse_model(coarse_model, cfg)?;
        Ok(Self {
            analyzer: StreamingAnalyzer::new(frontend_config(cfg, sample_rate))?,
            encoder: StreamEncoder::new(coarse_model, mode)?,
            cb,
            cfg: *cfg,
            sample_rate,
            frames: 0,
        })
    }

    /// Feeds samples; returns the full code rows of frames completed by them.
    pub fn push_samples(&mut self, samples: &[f32]) -> Result<Vec<Vec<u32>>> {
        let mut rows = Vec::new();
        for frame in self.analyzer.push(samples)? {
            let codes = quantize(&frame, self.cb, self.cfg.n_layers())?;
            for &c in &codes[..self.cfg.n_coarse] {
                self.encoder.push(c)?;
            }
            self.frames += 1;
            rows.push(codes);
        }
        Ok(rows)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Payload bits so far.
    pub fn bits(&self) -> u64 {
        self.encoder.bits_so_far()
    }

    pub fn finish(self) -> Bitstream {
        let mut b = self.encoder.finish();
        stamp(&mut b, self.frames, self.sample_rate, &self.cfg);
        b
    }
}

/// One decoded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFrame {
    pub codes: Vec<u32>,
    /// Audio finalized by this frame (the block one hop behind it).
    pub samples: Vec<f32>,
}

/// Frame-synchronous receiver.
pub struct StreamingDecoder<'a> {
    decoder: StreamDecoder<'a, 'a>,
    fine: Option<FineSynthesizer<'a>>,
    synth: StreamingSynthesizer,
    cb: &'a Codebooks,
    cfg: CodecConfig,
    frames_left: usize,
}

impl<'a> StreamingDecoder<'a> {
    pub fn new(
        b: &'a Bitstream,
        cb: &'a Codebooks,
        coarse_model: &'a TokenModel,
        fine_model: Option<&'a TokenModel>,
        s: SamplerConfig,
    ) -> Result<Self> {
        check_stream_model(&b.header, coarse_model)?;
        check_fine_id(b, fine_model)?;
        let (cfg, fcfg) = stream_geometry(b, cb)?;
        let fine = match fine_model {
            Some(f) if cfg.n_fine > 0 => Some(FineSynthesizer::new(f, &cfg, s)?),
            _ => None,
        };
        Ok(Self {
            decoder: StreamDecoder::new(b, coarse_model)?,
            fine,
            synth: StreamingSynthesizer::new(fcfg)?,
            cb,
            cfg,
            frames_left: b.header.frame_count as usize,
        })
    }

    /// Decodes the next frame, or `None` after the last one.
    pub fn next_frame(&mut self) -> Result<Option<DecodedFrame>> {
        if self.frames_left == 0 {
            return Ok(None);
        }
        self.frames_left -= 1;
        let mut codes = vec![0u32; self.cfg.n_layers()];
        for c in codes.iter_mut().take(self.cfg.n_coarse) {
            *c = self.decoder.next_symbol()?;
        }
        let layers = match &mut self.fine {
            Some(f) => {
                f.fill(&mut codes)?;
                self.cfg.n_layers()
            }
            None => self.cfg.n_coarse,
        };
        let emb = dequantize(&codes[..layers], self.cb)?;
        let samples = self.synth.push_frame(&emb)?;
        Ok(Some(DecodedFrame { codes, samples }))
    }

    /// Validates the end of the stream and returns the final audio block.
    pub fn finish(self) -> Result<Vec<f32>> {
        if self.frames_left != 0 {
            return Err(CodecError::CorruptStream(format!(
                "{} frames were not decoded",
                self.frames_left
            )));
        }
        self.decoder.finish()?;
        Ok(self.synth.finish())
    }
}

#[cfg(test)]
mod tests;
