//! Voice-activity gating and rate reports.
//!
//! Voice probability is a logistic function of each 10 ms window's level in
//! dBFS. A 20 ms codec frame counts as voiced when both of its windows clear
//! the threshold. Reports give accuracy, entropy and realized bitrates for a
//! configuration, and the two VAD scenarios: transmitting voiced frames only
//! (rate over voiced time), or transmitting everything but spending zero bits
//! on unvoiced frames (rate over total time).

use serde::{Deserialize, Serialize};

use crate::entropy::{encode_stream, stream_costs, stream_costs_masked, Mode, StreamCosts};
use crate::error::{CodecError, Result};
use crate::frontend::Waveform;
use crate::probmodel::{evaluate, flatten_coarse, Role, TokenModel};
use crate::rvq::TokenGrid;

/// Level reported for digital silence.
pub const SILENCE_DBFS: f64 = -200.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VoicingRule {
    /// Both windows above the threshold.
    #[default]
    Min,
    /// Mean of the two windows above the threshold.
    Mean,
    /// Product of the two windows above the threshold.
    Product,
}

impl std::str::FromStr for VoicingRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "min" => Ok(Self::Min),
            "mean" => Ok(Self::Mean),
            "product" => Ok(Self::Product),
            _ => Err(format!(
                "unknown voicing rule {s:?} (expected min, mean or product)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VadConfig {
    /// Level at which the voice probability is 0.5.
    pub threshold_dbfs: f64,
    /// Logistic slope in dB.
    pub slope_db: f64,
    /// A frame is voiced when the rule's statistic is strictly above this.
    pub voiced_prob: f64,
    pub rule: VoicingRule,
    /// Whether voiced-only rates condition on unvoiced frames too.
    pub skip_unvoiced_context: bool,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            threshold_dbfs: -40.0,
            slope_db: 5.0,
            voiced_prob: 0.8,
            rule: VoicingRule::Min,
            skip_unvoiced_context: true,
        }
    }
}

/// RMS level of a block in dBFS, full scale being a sample of magnitude 1.
pub fn rms_dbfs(block: &[f32]) -> f64 {
    if block.is_empty() {
        return SILENCE_DBFS;
    }
    let ms = block.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / block.len() as f64;
    if ms <= 0.0 {
        SILENCE_DBFS
    } else {
        (10.0 * ms.log10()).max(SILENCE_DBFS)
    }
}

/// Voice probability per 10 ms window; a trailing partial window is dropped.
pub fn vad_probs(w: &Waveform, cfg: &VadConfig) -> Result<Vec<f64>> {
    if w.sample_rate % 100 != 0 {
        return Err(CodecError::UnsupportedAudio(format!(
            "sample rate {} has no whole 10 ms window",
            w.sample_rate
        )));
    }
    if !(cfg.slope_db > 0.0) {
        return Err(CodecError::InvalidConfig(
            "VAD slope must be positive".into(),
        ));
    }
    let win = w.sample_rate as usize / 100;
    Ok(w.samples
        .chunks_exact(win)
        .map(|b| 1.0 / (1.0 + (-(rms_dbfs(b) - cfg.threshold_dbfs) / cfg.slope_db).exp()))
        .collect())
}

/// Voicing of each 20 ms frame from consecutive pairs of 10 ms probabilities.
pub fn frame_voicing(probs: &[f64], cfg: &VadConfig) -> Vec<bool> {
    probs
        .chunks_exact(2)
        .map(|p| {
            let stat = match cfg.rule {
                VoicingRule::Min => p[0].min(p[1]),
                VoicingRule::Mean => 0.5 * (p[0] + p[1]),
                VoicingRule::Product => p[0] * p[1],
            };
            stat > cfg.voiced_prob
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VadTrack {
    pub probs_10ms: Vec<f64>,
    pub voiced_20ms: Vec<bool>,
}

impl VadTrack {
    pub fn from_probs(probs: Vec<f64>, cfg: &VadConfig) -> Self {
        let voiced_20ms = frame_voicing(&probs, cfg);
        Self {
            probs_10ms: probs,
            voiced_20ms,
        }
    }

    pub fn from_waveform(w: &Waveform, cfg: &VadConfig) -> Result<Self> {
        Ok(Self::from_probs(vad_probs(w, cfg)?, cfg))
    }

    pub fn voiced_frames(&self) -> usize {
        self.voiced_20ms.iter().filter(|&&v| v).count()
    }
}

/// One configuration's coding performance over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub frames: usize,
    pub duration_secs: f64,
    pub coarse_accuracy: f64,
    /// Absent when no fine model was evaluated.
    pub fine_accuracy: Option<f64>,
    /// Sum of predictive entropies per second.
    pub entropy_bps: f64,
    pub cross_entropy_bps: f64,
    pub huffman_bps: f64,
    pub range_bps: f64,
    /// Uncompressed coarse rate: layers x frame rate x bits per code.
    pub raw_bps: f64,
}

pub const RATE_CSV_HEADER: &str =
    "n_coarse,n_fine,frames,duration_secs,coarse_accuracy,fine_accuracy,entropy_bps,cross_entropy_bps,huffman_bps,range_bps,raw_bps";

impl RateReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.3},{:.6},{},{:.3},{:.3},{:.3},{:.3},{:.3}",
            self.n_coarse,
            self.n_fine,
            self.frames,
            self.duration_secs,
            self.coarse_accuracy,
            self.fine_accuracy
                .map(|a| format!("{a:.6}"))
                .unwrap_or_default(),
            self.entropy_bps,
            self.cross_entropy_bps,
            self.huffman_bps,
            self.range_bps,
            self.raw_bps
        )
    }
}

/// Rows with the header line, newline terminated.
pub fn rate_csv(rows: &[RateReport]) -> String {
    let mut s = format!("{RATE_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Raw coarse bitrate of a geometry at a frame rate.
pub fn raw_bps(n_coarse: usize, frame_rate: f64, bits_per_code: u32) -> f64 {
    n_coarse as f64 * frame_rate * bits_per_code as f64
}

fn per_second(bits: f64, secs: f64) -> f64 {
    if secs > 0.0 {
        bits / secs
    } else {
        0.0
    }
}

/// Coding performance of `coarse_model` (and optionally `fine_model`) over grids.
pub fn rate_report(
    grids: &[TokenGrid],
    coarse_model: &TokenModel,
    fine_model: Option<&TokenModel>,
    frame_rate: f64,
) -> Result<RateReport> {
    if coarse_model.role() != Role::Coarse {
        return Err(CodecError::ContextError(
            "rate reports need a coarse model".into(),
        ));
    }
    let cfg = *coarse_model.config();
    let mut costs = StreamCosts::default();
    let mut range_bits = 0u64;
    let mut frames = 0;
    for g in grids {
        let syms = flatten_coarse(g);
        costs += stream_costs(coarse_model, &syms)?;
        range_bits += encode_stream(&syms, coarse_model, Mode::Range)?.bit_count;
        frames += g.n_frames();
    }
    let fine_accuracy = match fine_model {
        Some(f) if cfg.n_fine > 0 => Some(evaluate(f, grids)?.accuracy()),
        _ => None,
    };
    let secs = frames as f64 / frame_rate;
    Ok(RateReport {
        n_coarse: cfg.n_coarse,
        n_fine: cfg.n_fine,
        frames,
        duration_secs: secs,
        coarse_accuracy: if costs.symbols == 0 {
            0.0
        } else {
            costs.correct as f64 / costs.symbols as f64
        },
        fine_accuracy,
        entropy_bps: per_second(costs.entropy_bits, secs),
        cross_entropy_bps: per_second(costs.cross_entropy_bits, secs),
        huffman_bps: per_second(costs.huffman_bits as f64, secs),
        range_bps: per_second(range_bits as f64, secs),
        raw_bps: raw_bps(cfg.n_coarse, frame_rate, cfg.bits_per_code()),
    })
}

/// Rates of one VAD scenario.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRates {
    pub entropy_bps: f64,
    pub cross_entropy_bps: f64,
    pub huffman_bps: f64,
}

impl ScenarioRates {
    fn from_costs(c: &StreamCosts, secs: f64) -> Self {
        Self {
            entropy_bps: per_second(c.entropy_bits, secs),
            cross_entropy_bps: per_second(c.cross_entropy_bits, secs),
            huffman_bps: per_second(c.huffman_bits as f64, secs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VadRateReport {
    pub n_coarse: usize,
    pub frames: usize,
    pub voiced_frames: usize,
    /// Voiced frames only, over voiced time.
    pub voiced_only: ScenarioRates,
    /// Zero bits for unvoiced frames, over total time.
    pub zero_unvoiced: ScenarioRates,
    pub raw_bps: f64,
}

pub const VAD_CSV_HEADER: &str = "n_coarse,frames,voiced_frames,voiced_only_entropy_bps,voiced_only_cross_entropy_bps,voiced_only_huffman_bps,zero_unvoiced_entropy_bps,zero_unvoiced_cross_entropy_bps,zero_unvoiced_huffman_bps,raw_bps";

impl VadRateReport {
    pub fn csv_row(&self) -> String {
        let (a, b) = (&self.voiced_only, &self.zero_unvoiced);
        format!(
            "{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
            self.n_coarse,
            self.frames,
            self.voiced_frames,
            a.entropy_bps,
            a.cross_entropy_bps,
            a.huffman_bps,
            b.entropy_bps,
            b.cross_entropy_bps,
            b.huffman_bps,
            self.raw_bps
        )
    }
}

pub fn vad_csv(rows: &[VadRateReport]) -> String {
    let mut s = format!("{VAD_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Bitrates of the two VAD scenarios for one grid.
pub fn vad_rate_report(
    g: &TokenGrid,
    coarse_model: &TokenModel,
    vad: &VadTrack,
    cfg: &VadConfig,
    frame_rate: f64,
) -> Result<VadRateReport> {
    if vad.voiced_20ms.len() != g.n_frames() {
        return Err(CodecError::ShapeError(format!(
            "VAD track has {} frames, grid has {}",
            vad.voiced_20ms.len(),
            g.n_frames()
        )));
    }
    if coarse_model.role() != Role::Coarse {
        return Err(CodecError::ContextError(
            "VAD reports need a coarse model".into(),
        ));
    }
    let nc = g.config().n_coarse;
    let voiced = &vad.voiced_20ms;
    let n_voiced = vad.voiced_frames();
    let voiced_costs = if cfg.skip_unvoiced_context {
        stream_costs(coarse_model, &flatten_coarse(&g.select_frames(voiced)?))?
    } else {
        stream_costs_masked(coarse_model, &flatten_coarse(g), |i| voiced[i / nc])?
    };
    let gated_costs = stream_costs_masked(coarse_model, &flatten_coarse(g), |i| voiced[i / nc])?;
    let mc = coarse_model.config();
    Ok(VadRateReport {
        n_coarse: nc,
        frames: g.n_frames(),
        voiced_frames: n_voiced,
        voiced_only: ScenarioRates::from_costs(&voiced_costs, n_voiced as f64 / frame_rate),
        zero_unvoiced: ScenarioRates::from_costs(&gated_costs, g.n_frames() as f64 / frame_rate),
        raw_bps: raw_bps(nc, frame_rate, mc.bits_per_code()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileRow {
    pub frame_index: usize,
    pub mean_entropy_bits: f64,
    pub voiced_flag: bool,
}

/// Mean predictive entropy of the model's positions in each frame.
pub fn confidence_profile(
    model: &TokenModel,
    g: &TokenGrid,
    voiced: Option<&[bool]>,
) -> Result<Vec<ProfileRow>> {
    if let Some(v) = voiced {
        if v.len() != g.n_frames() {
            return Err(CodecError::ShapeError(format!(
                "{} voicing flags for {} frames",
                v.len(),
                g.n_frames()
            )));
        }
    }
    let flat = model.flattening();
    let mut session = model.session();
    let mut rows = Vec::with_capacity(g.n_frames());
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, code) in flat.flatten(g).into_iter().enumerate() {
        if session.is_target() {
            sum += session.distribution()?.entropy_bits();
            count += 1;
        }
        session.push(code)?;
        let (frame, layer) = flat.position(i);
        if layer + 1 == flat.per_frame() {
            rows.push(ProfileRow {
                frame_index: frame,
                mean_entropy_bits: if count == 0 { 0.0 } else { sum / count as f64 },
                voiced_flag: voiced.is_none_or(|v| v[frame]),
            });
            sum = 0.0;
            count = 0;
        }
    }
    Ok(rows)
}

pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut s = String::from("frame_index,mean_entropy_bits,voiced_flag\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{}\n",
            r.frame_index,
            r.mean_entropy_bits,
            u8::from(r.voiced_flag)
        ));
    }
    s
}

#[cfg(test)]
mod tests;
