//! Lossless coding of token streams under per-step model distributions.
//!
//! Every coding decision is made on a [`QuantizedDistribution`] (integer
//! frequencies summing to 2^16), never on floats, so sender and receiver agree
//! bit for bit. Two coders are available: a fresh canonical Huffman code per
//! symbol, and a binary arithmetic coder.

mod bits;
mod huffman;
mod range;

use serde::{Deserialize, Serialize};

pub use bits::{BitReader, BitWriter};
pub use huffman::{code_lengths, huffman_codebook, HuffmanCode};
pub use range::{RangeDecoder, RangeEncoder};

use crate::config::CodecConfig;
use crate::error::{CodecError, Result};
use crate::probmodel::{ModelId, ModelSession, Role, StepDistribution, TokenModel};

/// Sum of every quantized distribution.
pub const FREQ_TOTAL: u32 = 1 << 16;

/// `-Σ p log2 p`, skipping zero entries.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum()
}

/// Integer frequencies, each at least 1, summing to [`FREQ_TOTAL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedDistribution {
    freqs: Vec<u32>,
    /// `cum[i]` = sum of `freqs[..i]`; one longer than `freqs`.
    cum: Vec<u32>,
}

impl QuantizedDistribution {
    pub fn from_freqs(freqs: Vec<u32>) -> Result<Self> {
        if freqs.len() < 2
            || freqs.contains(&0)
            || freqs.iter().map(|&f| f as u64).sum::<u64>() != FREQ_TOTAL as u64
        {
            return Err(CodecError::InvalidConfig(format!(
                "frequencies must be positive and sum to {FREQ_TOTAL}"
            )));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0;
        cum.push(0);
        for &f in &freqs {
            acc += f;
            cum.push(acc);
        }
        Ok(Self { freqs, cum })
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    /// `[lo, hi)` cumulative interval of a symbol.
    pub fn interval(&self, symbol: u32) -> (u32, u32) {
        (self.cum[symbol as usize], self.cum[symbol as usize + 1])
    }

    /// Symbol whose interval contains `target` (< [`FREQ_TOTAL`]).
    pub fn symbol_at(&self, target: u32) -> u32 {
        (self.cum.partition_point(|&c| c <= target) - 1) as u32
    }

    /// `-log2(freq / 2^16)`.
    pub fn cost_bits(&self, symbol: u32) -> f64 {
        16.0 - (self.freqs[symbol as usize] as f64).log2()
    }

    pub fn entropy_bits(&self) -> f64 {
        self.freqs
            .iter()
            .map(|&f| {
                let p = f as f64 / FREQ_TOTAL as f64;
                -p * p.log2()
            })
            .sum()
    }
}

/// Largest-remainder apportionment of `d` to [`FREQ_TOTAL`] with every
/// frequency at least 1. Ties go to the lowest index.
pub fn quantize_distribution(d: &StepDistribution) -> QuantizedDistribution {
    let n = d.len();
    assert!(
        n >= 2 && n <= FREQ_TOTAL as usize,
        "cannot quantize {n} symbols"
    );
    let scaled: Vec<f64> = d.probs().iter().map(|&p| p * FREQ_TOTAL as f64).collect();
    let mut freqs: Vec<u32> = scaled.iter().map(|&s| (s.floor() as u32).max(1)).collect();
    let rem: Vec<f64> = scaled.iter().map(|&s| s - s.floor()).collect();
    let sum: i64 = freqs.iter().map(|&f| f as i64).sum();
    let mut diff = FREQ_TOTAL as i64 - sum;
    if diff > 0 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| rem[b].total_cmp(&rem[a]).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if diff == 0 {
                break;
            }
            freqs[i] += 1;
            diff -= 1;
        }
    } else if diff < 0 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| rem[a].total_cmp(&rem[b]).then(a.cmp(&b)));
        while diff < 0 {
            for &i in &order {
                if diff == 0 {
                    break;
                }
                if freqs[i] > 1 {
                    freqs[i] -= 1;
                    diff += 1;
                }
            }
        }
    }
    QuantizedDistribution::from_freqs(freqs).expect("apportionment preserves the total")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Huffman,
    Range,
}

impl Mode {
    pub fn as_byte(self) -> u8 {
        match self {
            Mode::Huffman => 0,
            Mode::Range => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Mode::Huffman),
            1 => Some(Mode::Range),
            _ => None,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "huffman" => Ok(Mode::Huffman),
            "range" => Ok(Mode::Range),
            _ => Err(format!(
                "unknown coding mode {s:?} (expected huffman or range)"
            )),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Huffman => "huffman",
            Mode::Range => "range",
        })
    }
}

pub const STREAM_MAGIC: &[u8; 4] = b"TCB1";
pub const STREAM_VERSION: u16 = 1;
/// Serialized header size including its CRC.
pub const HEADER_LEN: usize = 95;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u16,
    pub codebook_size: u32,
    pub n_coarse: u8,
    pub n_fine: u8,
    pub frame_count: u32,
    pub sample_rate: u32,
    pub hop: u16,
    pub mode: Mode,
    pub coarse_model_id: ModelId,
    /// [`ModelId::NONE`] when the sender names no fine model.
    pub fine_model_id: ModelId,
    pub symbol_count: u32,
}

impl StreamHeader {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_LEN);
        b.extend(STREAM_MAGIC);
        b.extend(self.version.to_le_bytes());
        b.extend(self.codebook_size.to_le_bytes());
        b.push(self.n_coarse);
        b.push(self.n_fine);
        b.extend(self.frame_count.to_le_bytes());
        b.extend(self.sample_rate.to_le_bytes());
        b.extend(self.hop.to_le_bytes());
        b.push(self.mode.as_byte());
        b.extend(self.coarse_model_id.0);
        b.extend(self.fine_model_id.0);
        b.extend(self.symbol_count.to_le_bytes());
        let crc = crc32fast::hash(&b);
        b.extend(crc.to_le_bytes());
        debug_assert_eq!(b.len(), HEADER_LEN);
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_LEN {
            return Err(CodecError::CorruptStream(format!(
                "{} bytes is shorter than a header",
                b.len()
            )));
        }
        if &b[..4] != STREAM_MAGIC {
            return Err(CodecError::Format("not a TCB1 bitstream".into()));
        }
        let crc = u32::from_le_bytes(b[91..95].try_into().unwrap());
        if crc32fast::hash(&b[..91]) != crc {
            return Err(CodecError::CorruptStream("header checksum mismatch".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes(b[i..i + 2].try_into().unwrap());
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != STREAM_VERSION {
            return Err(CodecError::Format(format!(
                "unsupported bitstream version {version}"
            )));
        }
        Ok(Self {
            version,
            codebook_size: u32_at(6),
            n_coarse: b[10],
            n_fine: b[11],
            frame_count: u32_at(12),
            sample_rate: u32_at(16),
            hop: u16_at(20),
            mode: Mode::from_byte(b[22])
                .ok_or_else(|| CodecError::CorruptStream(format!("unknown mode {}", b[22])))?,
            coarse_model_id: ModelId(b[23..55].try_into().unwrap()),
            fine_model_id: ModelId(b[55..87].try_into().unwrap()),
            symbol_count: u32_at(87),
        })
    }
}

/// Header plus entropy-coded payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: StreamHeader,
    pub payload: Vec<u8>,
    /// Exact payload length in bits. After parsing from bytes this includes
    /// the zero padding of the last byte.
    pub bit_count: u64,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = self.header.to_bytes();
        b.extend(&self.payload);
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let header = StreamHeader::from_bytes(b)?;
        let payload = b[HEADER_LEN..].to_vec();
        Ok(Self {
            header,
            bit_count: payload.len() as u64 * 8,
            payload,
        })
    }

    /// Payload bits per second of audio described by the header.
    pub fn bits_per_second(&self) -> f64 {
        let secs = self.header.frame_count as f64 * self.header.hop as f64
            / self.header.sample_rate.max(1) as f64;
        if secs == 0.0 {
            0.0
        } else {
            self.bit_count as f64 / secs
        }
    }

    /// Copy with the payload cut to `bits` bits.
    pub fn truncated(&self, bits: u64) -> Self {
        let bits = bits.min(self.bit_count);
        let mut payload = self.payload[..bits.div_ceil(8) as usize].to_vec();
        if bits % 8 != 0 {
            *payload.last_mut().unwrap() &= 0xFFu8 << (8 - bits % 8);
        }
        Self {
            header: self.header.clone(),
            payload,
            bit_count: bits,
        }
    }
}

fn coarse_session(model: &TokenModel) -> Result<ModelSession<'_>> {
    if model.role() != Role::Coarse {
        return Err(CodecError::ContextError(format!(
            "only coarse models drive the transmitted stream, got a {} model",
            model.role()
        )));
    }
    Ok(model.session())
}

enum Coder {
    Huffman(BitWriter),
    Range(RangeEncoder),
}

/// Incremental encoder over a coarse-role symbol stream.
pub struct StreamEncoder<'m> {
    session: ModelSession<'m>,
    coder: Coder,
    mode: Mode,
    count: u32,
}

impl<'m> StreamEncoder<'m> {
    pub fn new(model: &'m TokenModel, mode: Mode) -> Result<Self> {
        Ok(Self {
            session: coarse_session(model)?,
            coder: match mode {
                Mode::Huffman => Coder::Huffman(BitWriter::new()),
                Mode::Range => Coder::Range(RangeEncoder::new()),
            },
            mode,
            count: 0,
        })
    }

    pub fn push(&mut self, symbol: u32) -> Result<()> {
        let size = self.session.model().config().codebook_size;
        if symbol as usize >= size {
            return Err(CodecError::InvalidSymbol {
                index: self.count as usize,
                symbol,
                size,
            });
        }
        let q = quantize_distribution(&self.session.distribution()?);
        match &mut self.coder {
            Coder::Huffman(w) => huffman_codebook(&q).encode(symbol, w),
            Coder::Range(r) => r.encode(&q, symbol),
        }
        self.session.push(symbol)?;
        self.count += 1;
        Ok(())
    }

    pub fn symbol_count(&self) -> u32 {
        self.count
    }

    /// Payload bits so far; for range mode, as if the stream ended now.
    pub fn bits_so_far(&self) -> u64 {
        match &self.coder {
            Coder::Huffman(w) => w.bit_count(),
            Coder::Range(r) => r.projected_bits(),
        }
    }

    /// Finishes the payload. Header fields describing the audio are left at
    /// zero for the caller to fill.
    pub fn finish(self) -> Bitstream {
        let model = self.session.model();
        let cfg = model.config();
        let (payload, bit_count) = match self.coder {
            Coder::Huffman(w) => w.into_parts(),
            Coder::Range(_) if self.count == 0 => (Vec::new(), 0),
            Coder::Range(r) => r.finish(),
        };
        let frames = self.count as usize / cfg.n_coarse;
        Bitstream {
            header: StreamHeader {
                version: STREAM_VERSION,
                codebook_size: cfg.codebook_size as u32,
                n_coarse: cfg.n_coarse as u8,
                n_fine: cfg.n_fine as u8,
                frame_count: frames as u32,
                sample_rate: 0,
                hop: 0,
                mode: self.mode,
                coarse_model_id: model.model_id(),
                fine_model_id: ModelId::NONE,
                symbol_count: self.count,
            },
            payload,
            bit_count,
        }
    }
}

/// Encodes a coarse-role symbol stream.
pub fn encode_stream(symbols: &[u32], model: &TokenModel, mode: Mode) -> Result<Bitstream> {
    let mut enc = StreamEncoder::new(model, mode)?;
    for &s in symbols {
        enc.push(s)?;
    }
    Ok(enc.finish())
}

enum Decoder<'b> {
    Huffman(BitReader<'b>),
    Range(RangeDecoder<'b>),
}

/// Incremental decoder; pulls one symbol at a time.
pub struct StreamDecoder<'m, 'b> {
    session: ModelSession<'m>,
    coder: Decoder<'b>,
    remaining: u32,
}

/// Checks that `model` is the one the stream was coded with.
pub fn check_stream_model(header: &StreamHeader, model: &TokenModel) -> Result<()> {
    if header.coarse_model_id != model.model_id() {
        return Err(CodecError::ModelMismatch {
            expected: header.coarse_model_id,
            found: model.model_id(),
        });
    }
    let cfg = model.config();
    if header.codebook_size as usize != cfg.codebook_size
        || header.n_coarse as usize != cfg.n_coarse
    {
        return Err(CodecError::CorruptStream(format!(
            "header geometry ({}, {}) disagrees with the model",
            header.codebook_size, header.n_coarse
        )));
    }
    Ok(())
}

impl<'m, 'b> StreamDecoder<'m, 'b> {
    pub fn new(b: &'b Bitstream, model: &'m TokenModel) -> Result<Self> {
        check_stream_model(&b.header, model)?;
        let session = coarse_session(model)?;
        let reader = BitReader::new(&b.payload, b.bit_count);
        let coder = match b.header.mode {
            // An empty stream has no payload in either mode.
            _ if b.header.symbol_count == 0 => Decoder::Huffman(reader),
            Mode::Huffman => Decoder::Huffman(reader),
            Mode::Range => Decoder::Range(RangeDecoder::new(reader)),
        };
        Ok(Self {
            session,
            coder,
            remaining: b.header.symbol_count,
        })
    }

    pub fn remaining(&self) -> u32 {
        self.remaining
    }

    pub fn next_symbol(&mut self) -> Result<u32> {
        if self.remaining == 0 {
            return Err(CodecError::CorruptStream(
                "read past the declared symbol count".into(),
            ));
        }
        let q = quantize_distribution(&self.session.distribution()?);
        let s = match &mut self.coder {
            Decoder::Huffman(r) => huffman_codebook(&q).decode(r)?,
            Decoder::Range(r) => r.decode(&q)?,
        };
        self.session.push(s)?;
        self.remaining -= 1;
        Ok(s)
    }

    /// Validates the end of the payload after the last symbol.
    pub fn finish(self) -> Result<()> {
        if self.remaining != 0 {
            return Err(CodecError::CorruptStream(format!(
                "{} symbols were not decoded",
                self.remaining
            )));
        }
        match self.coder {
            Decoder::Huffman(mut r) => {
                // Only zero byte padding may follow the last codeword.
                let left = r.remaining();
                let mut all_zero = true;
                while let Some(bit) = r.read() {
                    all_zero &= !bit;
                }
                if left >= 8 || !all_zero {
                    return Err(CodecError::CorruptStream(format!(
                        "{left} trailing payload bits"
                    )));
                }
                Ok(())
            }
            Decoder::Range(r) => r.finish(),
        }
    }
}

/// Decodes a whole stream, checking the model id before reading the payload.
pub fn decode_stream(b: &Bitstream, model: &TokenModel) -> Result<Vec<u32>> {
    let mut dec = StreamDecoder::new(b, model)?;
    let mut out = Vec::with_capacity(b.header.symbol_count as usize);
    while dec.remaining() > 0 {
        out.push(dec.next_symbol()?);
    }
    dec.finish()?;
    Ok(out)
}

/// `Σ -log2 p_t(s_t)` over the model's target positions of `symbols`, which
/// are in the model's role flattening.
pub fn cross_entropy_bits(model: &TokenModel, symbols: &[u32]) -> Result<f64> {
    Ok(stream_costs(model, symbols)?.cross_entropy_bits)
}

/// Ideal and realized code lengths of one stream under a model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StreamCosts {
    pub symbols: usize,
    pub correct: usize,
    /// Sum of the predictive entropies.
    pub entropy_bits: f64,
    /// Sum of `-log2 p(actual)`.
    pub cross_entropy_bits: f64,
    /// Same, under the quantized distributions used for coding.
    pub quantized_cross_entropy_bits: f64,
    /// Realized per-step Huffman code lengths.
    pub huffman_bits: u64,
}

impl std::ops::AddAssign for StreamCosts {
    fn add_assign(&mut self, o: Self) {
        self.symbols += o.symbols;
        self.correct += o.correct;
        self.entropy_bits += o.entropy_bits;
        self.cross_entropy_bits += o.cross_entropy_bits;
        self.quantized_cross_entropy_bits += o.quantized_cross_entropy_bits;
        self.huffman_bits += o.huffman_bits;
    }
}

/// Walks the model over `symbols` (role flattening), scoring each target position.
pub fn stream_costs(model: &TokenModel, symbols: &[u32]) -> Result<StreamCosts> {
    stream_costs_masked(model, symbols, |_| true)
}

/// As [`stream_costs`], but only positions for which `count(index)` holds
/// contribute. The model still sees every symbol.
pub fn stream_costs_masked(
    model: &TokenModel,
    symbols: &[u32],
    count: impl Fn(usize) -> bool,
) -> Result<StreamCosts> {
    let mut c = StreamCosts::default();
    let mut session = model.session();
    for (i, &s) in symbols.iter().enumerate() {
        if session.is_target() && count(i) {
            let d = session.distribution()?;
            let size = d.len();
            if s as usize >= size {
                return Err(CodecError::InvalidSymbol {
                    index: i,
                    symbol: s,
                    size,
                });
            }
            let q = quantize_distribution(&d);
            c.symbols += 1;
            c.correct += usize::from(d.argmax() == s);
            c.entropy_bits += d.entropy_bits();
            c.cross_entropy_bits -= d.probs()[s as usize].log2();
            c.quantized_cross_entropy_bits += q.cost_bits(s);
            c.huffman_bits += huffman_codebook(&q).code(s).1 as u64;
        }
        session.push(s)?;
    }
    Ok(c)
}

/// Geometry a stream header describes.
pub fn header_config(h: &StreamHeader, embed_dim: usize) -> Result<CodecConfig> {
    let cfg = CodecConfig {
        codebook_size: h.codebook_size as usize,
        n_coarse: h.n_coarse as usize,
        n_fine: h.n_fine as usize,
        embed_dim,
    };
    cfg.validate()?;
    Ok(cfg)
}
