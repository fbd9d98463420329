//! Causal autoregressive models over token grids.
//!
//! A grid is serialized frame by frame, layers ascending within a frame. The
//! coarse model sees only the coarse layers of that serialization and predicts
//! every position in it. The fine model sees all layers and predicts only the
//! fine positions, conditioned on everything before them: past frames in full
//! plus the coarse and lower fine layers of the current frame.
//!
//! Two model families implement the same interface: smoothed context counts
//! and a small decoder-only transformer. Both are driven through
//! [`ModelSession`], which consumes one symbol at a time; the stateless
//! [`next_distribution`] replays a [`SymbolContext`] through a fresh session.

mod context;
mod io;
pub mod transformer;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::CodecConfig;
use crate::error::{CodecError, Result};
use crate::rvq::TokenGrid;
pub use context::ContextModel;
pub use io::{read_model, write_model, MODEL_MAGIC};
pub use transformer::{TrainingLog, Transformer, TransformerConfig};

/// Minimum probability of any symbol.
pub const PROB_FLOOR: f64 = 1.0 / 65536.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Coarse,
    Fine,
}

impl Role {
    pub fn as_byte(self) -> u8 {
        match self {
            Role::Coarse => 0,
            Role::Fine => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Role::Coarse),
            1 => Some(Role::Fine),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Coarse => "coarse",
            Role::Fine => "fine",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Context,
    Transformer,
}

/// SHA-256 of a model's serialized body.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ModelId(pub [u8; 32]);

impl ModelId {
    pub const NONE: ModelId = ModelId([0; 32]);

    pub fn is_none(&self) -> bool {
        *self == Self::NONE
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModelId({self})")
    }
}

/// Serialization order of a grid for one model role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flattening {
    pub role: Role,
    pub n_coarse: usize,
    pub n_fine: usize,
}

impl Flattening {
    pub fn new(role: Role, cfg: &CodecConfig) -> Self {
        Self {
            role,
            n_coarse: cfg.n_coarse,
            n_fine: cfg.n_fine,
        }
    }

    /// Symbols per frame in this serialization.
    pub fn per_frame(&self) -> usize {
        match self.role {
            Role::Coarse => self.n_coarse,
            Role::Fine => self.n_coarse + self.n_fine,
        }
    }

    /// Zero-based `(frame, layer)` of sequence index `i`.
    pub fn position(&self, i: usize) -> (usize, usize) {
        (i / self.per_frame(), i % self.per_frame())
    }

    pub fn index(&self, frame: usize, layer: usize) -> usize {
        frame * self.per_frame() + layer
    }

    /// Whether the model predicts this layer.
    pub fn is_target(&self, layer: usize) -> bool {
        match self.role {
            Role::Coarse => layer < self.n_coarse,
            Role::Fine => layer >= self.n_coarse && layer < self.n_coarse + self.n_fine,
        }
    }

    pub fn flatten(&self, g: &TokenGrid) -> Vec<u32> {
        match self.role {
            Role::Coarse => flatten_coarse(g),
            Role::Fine => g.codes().to_vec(),
        }
    }
}

/// Coarse layers only, frame-major: `c(1,1) .. c(1,Nc), c(2,1) ..`.
pub fn flatten_coarse(g: &TokenGrid) -> Vec<u32> {
    let nc = g.config().n_coarse;
    (0..g.n_frames())
        .flat_map(|f| g.frame(f)[..nc].iter().copied())
        .collect()
}

/// Inverse of [`flatten_coarse`]; fine layers are zero.
pub fn unflatten_coarse(symbols: &[u32], cfg: &CodecConfig) -> Result<TokenGrid> {
    let nc = cfg.n_coarse;
    if symbols.len() % nc != 0 {
        return Err(CodecError::ShapeError(format!(
            "{} coarse symbols do not fill frames of {nc}",
            symbols.len()
        )));
    }
    let frames = symbols.len() / nc;
    let mut codes = vec![0u32; frames * cfg.n_layers()];
    for (f, chunk) in symbols.chunks(nc).enumerate() {
        codes[f * cfg.n_layers()..f * cfg.n_layers() + nc].copy_from_slice(chunk);
    }
    TokenGrid::new(codes, *cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledSymbol {
    pub code: u32,
    pub level: Level,
}

/// Every layer, frame-major, each symbol tagged coarse or fine.
pub fn flatten_full(g: &TokenGrid) -> Vec<LabeledSymbol> {
    let nc = g.config().n_coarse;
    g.codes()
        .iter()
        .enumerate()
        .map(|(i, &code)| LabeledSymbol {
            code,
            level: if i % g.n_layers() < nc {
                Level::Coarse
            } else {
                Level::Fine
            },
        })
        .collect()
}

/// A probability vector over the codebook with every entry at least
/// [`PROB_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    probs: Vec<f64>,
}

impl StepDistribution {
    /// Normalizes non-negative weights, then mixes in the floor:
    /// `p' = floor + (1 - n * floor) * p`.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let n = weights.len();
        if n < 2 || (n as f64) * PROB_FLOOR >= 1.0 {
            return Err(CodecError::InvalidConfig(format!(
                "cannot floor a distribution over {n} symbols"
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CodecError::InvalidConfig(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Ok(Self::uniform(n));
        }
        let mass = 1.0 - n as f64 * PROB_FLOOR;
        Ok(Self {
            probs: weights
                .iter()
                .map(|w| PROB_FLOOR + mass * (w / total))
                .collect(),
        })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable symbol, lowest index on ties.
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as u32
    }

    pub fn entropy_bits(&self) -> f64 {
        crate::entropy::entropy_bits(&self.probs)
    }
}

/// Everything preceding a prediction target, in flattening order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolContext {
    /// `(frame, layer, code)`, zero-based.
    pub history: Vec<(usize, usize, u32)>,
    /// `(frame, layer)` being predicted.
    pub target: (usize, usize),
}

impl SymbolContext {
    /// Context for position `symbols.len()` of a flattened sequence.
    pub fn from_prefix(symbols: &[u32], flat: &Flattening) -> Self {
        Self {
            history: symbols
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let (f, l) = flat.position(i);
                    (f, l, c)
                })
                .collect(),
            target: flat.position(symbols.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ModelParams {
    Context(ContextModel),
    Transformer(Transformer),
}

/// A trained, immutable token model.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenModel {
    pub(crate) role: Role,
    pub(crate) config: CodecConfig,
    pub(crate) params: ModelParams,
    pub(crate) model_id: ModelId,
}

impl TokenModel {
    pub(crate) fn from_params(role: Role, config: CodecConfig, params: ModelParams) -> Self {
        let mut m = Self {
            role,
            config,
            params,
            model_id: ModelId::NONE,
        };
        m.model_id = io::compute_id(&m);
        m
    }

    /// A parameter-free model predicting the uniform distribution everywhere.
    pub fn uniform(role: Role, config: CodecConfig) -> Self {
        Self::from_params(
            role,
            config,
            ModelParams::Context(ContextModel::empty(1, config.codebook_size)),
        )
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn kind(&self) -> ModelKind {
        match self.params {
            ModelParams::Context(_) => ModelKind::Context,
            ModelParams::Transformer(_) => ModelKind::Transformer,
        }
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn model_id(&self) -> ModelId {
        self.model_id
    }

    pub fn flattening(&self) -> Flattening {
        Flattening::new(self.role, &self.config)
    }

    pub fn session(&self) -> ModelSession<'_> {
        let state = match &self.params {
            ModelParams::Context(m) => SessionState::Context(m.session()),
            ModelParams::Transformer(t) => {
                SessionState::Transformer(t.session(self.flattening().per_frame()))
            }
        };
        ModelSession {
            model: self,
            flat: self.flattening(),
            symbols: Vec::new(),
            state,
        }
    }

    pub(crate) fn check_grid(&self, g: &TokenGrid) -> Result<()> {
        let c = g.config();
        if c.codebook_size != self.config.codebook_size || c.n_coarse != self.config.n_coarse {
            return Err(CodecError::ContextError(format!(
                "grid geometry {c:?} does not match model geometry {:?}",
                self.config
            )));
        }
        if self.role == Role::Fine && c.n_fine != self.config.n_fine {
            return Err(CodecError::ContextError(format!(
                "grid has {} fine layers, fine model expects {}",
                c.n_fine, self.config.n_fine
            )));
        }
        Ok(())
    }
}

enum SessionState<'m> {
    Context(context::ContextSession<'m>),
    Transformer(transformer::TransformerSession<'m>),
}

/// Incremental prediction over one flattened stream.
pub struct ModelSession<'m> {
    model: &'m TokenModel,
    flat: Flattening,
    symbols: Vec<u32>,
    state: SessionState<'m>,
}

impl<'m> ModelSession<'m> {
    /// Index of the next symbol in the flattening.
    pub fn index(&self) -> usize {
        self.symbols.len()
    }

    /// `(frame, layer)` of the next symbol.
    pub fn position(&self) -> (usize, usize) {
        self.flat.position(self.symbols.len())
    }

    pub fn is_target(&self) -> bool {
        self.flat.is_target(self.position().1)
    }

    pub fn flattening(&self) -> Flattening {
        self.flat
    }

    pub fn model(&self) -> &'m TokenModel {
        self.model
    }

    /// Distribution of the next symbol. Only valid at target positions.
    pub fn distribution(&mut self) -> Result<StepDistribution> {
        let (frame, layer) = self.position();
        if !self.flat.is_target(layer) {
            return Err(CodecError::ContextError(format!(
                "{} model does not predict layer {} (frame {frame})",
                self.model.role,
                layer + 1
            )));
        }
        let nc = self.model.config.codebook_size;
        match &mut self.state {
            SessionState::Context(s) => s.distribution(layer, nc),
            SessionState::Transformer(s) => s.distribution(&self.symbols),
        }
    }

    pub fn push(&mut self, code: u32) -> Result<()> {
        if code as usize >= self.model.config.codebook_size {
            return Err(CodecError::InvalidSymbol {
                index: self.symbols.len(),
                symbol: code,
                size: self.model.config.codebook_size,
            });
        }
        if let SessionState::Context(s) = &mut self.state {
            s.push(code);
        }
        self.symbols.push(code);
        Ok(())
    }
}

/// Distribution of `ctx.target` given `ctx.history`.
///
/// The history must be the complete prefix of the model's flattening, and the
/// target a position the model predicts.
pub fn next_distribution(m: &TokenModel, ctx: &SymbolContext) -> Result<StepDistribution> {
    let flat = m.flattening();
    for (i, &(f, l, c)) in ctx.history.iter().enumerate() {
        if l >= flat.per_frame() {
            return Err(CodecError::ContextError(format!(
                "layer {} is outside the {} model's view",
                l + 1,
                m.role
            )));
        }
        if flat.position(i) != (f, l) {
            return Err(CodecError::ContextError(format!(
                "history entry {i} at ({f}, {l}) breaks the flattening order"
            )));
        }
        if c as usize >= m.config.codebook_size {
            return Err(CodecError::InvalidSymbol {
                index: i,
                symbol: c,
                size: m.config.codebook_size,
            });
        }
    }
    if flat.position(ctx.history.len()) != ctx.target {
        return Err(CodecError::ContextError(format!(
            "target {:?} does not follow a history of {} symbols",
            ctx.target,
            ctx.history.len()
        )));
    }
    let mut session = m.session();
    for &(_, _, c) in &ctx.history {
        session.push(c)?;
    }
    session.distribution()
}

/// Prediction quality of a model on a set of grids.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Evaluation {
    pub positions: usize,
    pub correct: usize,
    /// Sum of `-log2 p(actual)`.
    pub cross_entropy_bits: f64,
    /// Sum of the predictive entropies.
    pub entropy_bits: f64,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        if self.positions == 0 {
            0.0
        } else {
            self.correct as f64 / self.positions as f64
        }
    }

    pub fn bits_per_symbol(&self) -> f64 {
        if self.positions == 0 {
            0.0
        } else {
            self.cross_entropy_bits / self.positions as f64
        }
    }
}

/// Runs the model over every target position of every grid.
pub fn evaluate(m: &TokenModel, grids: &[TokenGrid]) -> Result<Evaluation> {
    let mut ev = Evaluation::default();
    for g in grids {
        m.check_grid(g)?;
        let flat = m.flattening();
        let mut session = m.session();
        for code in flat.flatten(g) {
            if session.is_target() {
                let d = session.distribution()?;
                ev.positions += 1;
                ev.correct += usize::from(d.argmax() == code);
                ev.cross_entropy_bits -= d.probs()[code as usize].log2();
                ev.entropy_bits += d.entropy_bits();
            }
            session.push(code)?;
        }
    }
    Ok(ev)
}

/// Fraction of role positions where the argmax prediction is the true code.
pub fn accuracy(m: &TokenModel, grids: &[TokenGrid]) -> Result<f64> {
    evaluate(m, grids).map(|e| e.accuracy())
}

/// Trains the smoothed context-count model.
pub fn train_context_model(
    grids: &[TokenGrid],
    role: Role,
    order: usize,
    cfg: &CodecConfig,
) -> Result<TokenModel> {
    let model = ContextModel::train(grids, role, order, cfg)?;
    Ok(TokenModel::from_params(
        role,
        *cfg,
        ModelParams::Context(model),
    ))
}

/// Trains the causal transformer. Returns the model and its loss curve.
pub fn train_transformer(
    grids: &[TokenGrid],
    role: Role,
    cfg: &CodecConfig,
    tcfg: &TransformerConfig,
    seed: u64,
) -> Result<(TokenModel, TrainingLog)> {
    let (net, log) = transformer::train(grids, role, cfg, tcfg, seed)?;
    Ok((
        TokenModel::from_params(role, *cfg, ModelParams::Transformer(net)),
        log,
    ))
}
