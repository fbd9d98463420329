//! Small decoder-only transformer over flattened token grids.
//!
//! Input at position `t` is the previous symbol (or a BOS token at the start
//! of a window) plus learned embeddings of `t`'s frame (relative to the window
//! start) and layer. Blocks are pre-norm: causal multi-head attention, then a
//! GELU MLP. The output projection is tied to the token embedding table.
//!
//! Streams longer than the context are handled by sliding the window in
//! steps of whole frames. The window for a target depends only on the
//! target's frame, so incremental and from-scratch evaluation agree.

pub(crate) mod ops;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Flattening, StepDistribution};
use crate::error::{CodecError, Result};
pub(crate) use train::train;
pub use train::TrainingLog;

/// Architecture and training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub width: usize,
    /// Maximum symbols attended to, rounded down to whole frames.
    pub context: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    /// Loss is logged every this many steps.
    pub log_every: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            n_heads: 8,
            width: 256,
            context: 1024,
            steps: 2000,
            batch_size: 8,
            learning_rate: 3e-4,
            warmup_steps: 100,
            grad_clip: 1.0,
            log_every: 10,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0
            || self.n_heads == 0
            || self.width == 0
            || self.width % self.n_heads != 0
        {
            return Err(CodecError::InvalidConfig(format!(
                "width {} must be a positive multiple of {} heads, with at least one block",
                self.width, self.n_heads
            )));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(CodecError::InvalidConfig(
                "batch size and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Offsets of each tensor in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Layout {
    pub vocab: usize,
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_frames: usize,
    pub per_frame: usize,
    pub tok: usize,
    pub frame: usize,
    pub layer: usize,
    pub block0: usize,
    pub block_size: usize,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub out_bias: usize,
    pub total: usize,
}

/// Offsets inside one block, relative to its start.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

impl BlockLayout {
    fn new(d: usize) -> (Self, usize) {
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let l = Self {
            ln1_g: take(d),
            ln1_b: take(d),
            w_qkv: take(d * 3 * d),
            b_qkv: take(3 * d),
            w_o: take(d * d),
            b_o: take(d),
            ln2_g: take(d),
            ln2_b: take(d),
            w_fc: take(d * 4 * d),
            b_fc: take(4 * d),
            w_proj: take(4 * d * d),
            b_proj: take(d),
        };
        (l, at)
    }
}

impl Layout {
    pub fn new(
        vocab: usize,
        d: usize,
        heads: usize,
        blocks: usize,
        max_frames: usize,
        per_frame: usize,
    ) -> Self {
        let (_, block_size) = BlockLayout::new(d);
        let tok = 0;
        let frame = tok + (vocab + 1) * d;
        let layer = frame + max_frames * d;
        let block0 = layer + per_frame * d;
        let lnf_g = block0 + blocks * block_size;
        let lnf_b = lnf_g + d;
        let out_bias = lnf_b + d;
        Self {
            vocab,
            d,
            heads,
            blocks,
            max_frames,
            per_frame,
            tok,
            frame,
            layer,
            block0,
            block_size,
            lnf_g,
            lnf_b,
            out_bias,
            total: out_bias + vocab,
        }
    }

    pub fn block(&self) -> BlockLayout {
        BlockLayout::new(self.d).0
    }

    pub fn block_start(&self, b: usize) -> usize {
        self.block0 + b * self.block_size
    }

    pub fn bos(&self) -> usize {
        self.vocab
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// First frame of the attention window that predicts a symbol in `frame`.
    pub fn window_start(&self, frame: usize) -> usize {
        let m = self.max_frames;
        if frame < m {
            return 0;
        }
        let half = (m / 2).max(1);
        ((frame - m) / half + 1) * half
    }
}

/// Trained transformer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub(crate) layout: Layout,
    pub(crate) params: Vec<f64>,
}

impl Transformer {
    pub(crate) fn init(
        vocab: usize,
        per_frame: usize,
        cfg: &TransformerConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if per_frame == 0 || cfg.context < per_frame {
            return Err(CodecError::InvalidConfig(format!(
                "context {} cannot hold one frame of {per_frame} symbols",
                cfg.context
            )));
        }
        let layout = Layout::new(
            vocab,
            cfg.width,
            cfg.n_heads,
            cfg.n_blocks,
            cfg.context / per_frame,
            per_frame,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        let proj = Normal::new(0.0, 0.02 / (2.0 * cfg.n_blocks as f64).sqrt()).unwrap();
        let mut params = vec![0.0; layout.total];
        for p in &mut params[layout.tok..layout.block0] {
            *p = normal.sample(&mut rng);
        }
        let bl = layout.block();
        let d = layout.d;
        for b in 0..layout.blocks {
            let s = layout.block_start(b);
            params[s + bl.ln1_g..s + bl.ln1_g + d].fill(1.0);
            params[s + bl.ln2_g..s + bl.ln2_g + d].fill(1.0);
            for p in &mut params[s + bl.w_qkv..s + bl.w_qkv + 3 * d * d] {
                *p = normal.sample(&mut rng);
            }
            for p in &mut params[s + bl.w_o..s + bl.w_o + d * d] {
                *p = proj.sample(&mut rng);
            }
            for p in &mut params[s + bl.w_fc..s + bl.w_fc + 4 * d * d] {
                *p = normal.sample(&mut rng);
            }
            for p in &mut params[s + bl.w_proj..s + bl.w_proj + 4 * d * d] {
                *p = proj.sample(&mut rng);
            }
        }
        params[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        Ok(Self { layout, params })
    }

    /// Freshly initialized network over `vocab` symbols, `per_frame` per frame.
    pub fn new(vocab: usize, per_frame: usize, cfg: &TransformerConfig, seed: u64) -> Result<Self> {
        Self::init(vocab, per_frame, cfg, seed)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Mean cross-entropy (nats) over the target positions of `symbols`, read
    /// as one window starting at frame 0, and its gradient.
    pub fn loss_and_grad(&self, symbols: &[u32], flat: &Flattening) -> Result<(f64, Vec<f64>)> {
        let l = &self.layout;
        if flat.per_frame() != l.per_frame || symbols.len() > l.max_frames * l.per_frame {
            return Err(CodecError::ShapeError(format!(
                "{} symbols do not fit a window of {} frames x {}",
                symbols.len(),
                l.max_frames,
                l.per_frame
            )));
        }
        if let Some(&s) = symbols.iter().find(|&&s| s as usize >= l.vocab) {
            return Err(CodecError::InvalidSymbol {
                index: 0,
                symbol: s,
                size: l.vocab,
            });
        }
        let frames = symbols.len().div_ceil(l.per_frame);
        let ex = train::Example::window(symbols, flat, 0, frames, l.bos());
        Ok(train::loss_and_grad(self, std::slice::from_ref(&ex)))
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn config_summary(&self) -> (usize, usize, usize, usize) {
        let l = &self.layout;
        (l.blocks, l.heads, l.d, l.max_frames * l.per_frame)
    }

    pub(crate) fn session(&self, per_frame: usize) -> TransformerSession<'_> {
        debug_assert_eq!(per_frame, self.layout.per_frame);
        TransformerSession {
            net: self,
            window: usize::MAX,
            fed: 0,
            k_cache: vec![Vec::new(); self.layout.blocks],
            v_cache: vec![Vec::new(); self.layout.blocks],
            last: None,
        }
    }

    fn p(&self, at: usize, len: usize) -> &[f64] {
        &self.params[at..at + len]
    }

    /// Embedding sum for one input position.
    fn embed(&self, token: usize, frame_rel: usize, layer: usize) -> Vec<f64> {
        let l = &self.layout;
        let d = l.d;
        let t = self.p(l.tok + token * d, d);
        let f = self.p(l.frame + frame_rel * d, d);
        let y = self.p(l.layer + layer * d, d);
        (0..d).map(|i| t[i] + f[i] + y[i]).collect()
    }

    /// Final norm and tied projection: logits over the codebook.
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let d = l.d;
        let (h, _, _) = ops::layer_norm(x, self.p(l.lnf_g, d), self.p(l.lnf_b, d), d);
        let mut logits = ops::matmul_bt(&h, self.p(l.tok, l.vocab * d), 1, d, l.vocab);
        for (o, b) in logits.iter_mut().zip(self.p(l.out_bias, l.vocab)) {
            *o += b;
        }
        logits
    }
}

/// KV-cached incremental evaluation over one window at a time.
pub(crate) struct TransformerSession<'m> {
    net: &'m Transformer,
    /// Start frame of the cached window, `usize::MAX` before the first call.
    window: usize,
    /// Positions of the current window already run through the blocks.
    fed: usize,
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
    last: Option<(usize, StepDistribution)>,
}

impl TransformerSession<'_> {
    /// Distribution for position `history.len()`.
    pub fn distribution(&mut self, history: &[u32]) -> Result<StepDistribution> {
        let pos = history.len();
        if let Some((p, d)) = &self.last {
            if *p == pos {
                return Ok(d.clone());
            }
        }
        let l = self.net.layout;
        let frame = pos / l.per_frame;
        let start = l.window_start(frame);
        if start != self.window {
            self.window = start;
            self.fed = 0;
            for c in self.k_cache.iter_mut().chain(self.v_cache.iter_mut()) {
                c.clear();
            }
        }
        let base = start * l.per_frame;
        let mut x = Vec::new();
        while base + self.fed <= pos {
            let q = base + self.fed;
            let token = if q == base {
                l.bos()
            } else {
                history[q - 1] as usize
            };
            x = self.step(token, q / l.per_frame - start, q % l.per_frame);
            self.fed += 1;
        }
        let mut probs = self.net.logits(&x);
        ops::softmax(&mut probs);
        let d = StepDistribution::from_weights(&probs)?;
        self.last = Some((pos, d.clone()));
        Ok(d)
    }

    /// Runs one position through every block, extending the caches.
    fn step(&mut self, token: usize, frame_rel: usize, layer: usize) -> Vec<f64> {
        let net = self.net;
        let l = net.layout;
        let bl = l.block();
        let d = l.d;
        let hd = l.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x = net.embed(token, frame_rel, layer);
        for b in 0..l.blocks {
            let s = l.block_start(b);
            let (a, _, _) = ops::layer_norm(&x, net.p(s + bl.ln1_g, d), net.p(s + bl.ln1_b, d), d);
            let qkv = ops::linear(
                &a,
                net.p(s + bl.w_qkv, 3 * d * d),
                net.p(s + bl.b_qkv, 3 * d),
                1,
                d,
                3 * d,
            );
            self.k_cache[b].extend_from_slice(&qkv[d..2 * d]);
            self.v_cache[b].extend_from_slice(&qkv[2 * d..]);
            let n = self.k_cache[b].len() / d;
            let mut att = vec![0.0; d];
            for h in 0..l.heads {
                let q = &qkv[h * hd..(h + 1) * hd];
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| {
                        ops::dot(q, &self.k_cache[b][j * d + h * hd..j * d + (h + 1) * hd]) * scale
                    })
                    .collect();
                ops::softmax(&mut scores);
                let out = &mut att[h * hd..(h + 1) * hd];
                for (j, &p) in scores.iter().enumerate() {
                    let v = &self.v_cache[b][j * d + h * hd..j * d + (h + 1) * hd];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
            let proj = ops::linear(
                &att,
                net.p(s + bl.w_o, d * d),
                net.p(s + bl.b_o, d),
                1,
                d,
                d,
            );
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }
            let (m, _, _) = ops::layer_norm(&x, net.p(s + bl.ln2_g, d), net.p(s + bl.ln2_b, d), d);
            let mut u = ops::linear(
                &m,
                net.p(s + bl.w_fc, 4 * d * d),
                net.p(s + bl.b_fc, 4 * d),
                1,
                d,
                4 * d,
            );
            for v in u.iter_mut() {
                *v = ops::gelu(*v);
            }
            let out = ops::linear(
                &u,
                net.p(s + bl.w_proj, 4 * d * d),
                net.p(s + bl.b_proj, d),
                1,
                4 * d,
                d,
            );
            for (xi, oi) in x.iter_mut().zip(&out) {
                *xi += oi;
            }
        }
        x
    }
}
