//! Effective run configuration: defaults, then the config file, then flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use tokencodec::pipeline::{SamplerConfig, Strategy};
use tokencodec::probmodel::TransformerConfig;
use tokencodec::vad_metrics::{VadConfig, VoicingRule};
use tokencodec::Mode;

use crate::errors::Usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKindArg {
    #[default]
    Context,
    Transformer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub codebook_size: usize,
    /// Total quantizer layers. Always `nc + nf` once resolved.
    pub layers: Option<usize>,
    pub nc: usize,
    pub nf: usize,
    pub mode: Mode,
    pub sampler: Strategy,
    pub temperature: f64,
    pub topk: usize,
    pub seed: u64,
    pub kind: ModelKindArg,
    pub order: usize,
    pub kmeans_iters: usize,
    pub transformer: TransformerConfig,
    pub vad: VadConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            codebook_size: 1024,
            layers: None,
            nc: 4,
            nf: 8,
            mode: Mode::Range,
            sampler: Strategy::Temperature,
            temperature: 1.0,
            topk: 50,
            seed: 0,
            kind: ModelKindArg::Context,
            order: 2,
            kmeans_iters: 50,
            transformer: TransformerConfig::default(),
            vad: VadConfig::default(),
        }
    }
}

impl Settings {
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            strategy: self.sampler,
            temperature: self.temperature,
            k: self.topk,
            seed: self.seed,
        }
    }
}

/// Flags shared by every command. Unset flags leave lower layers alone.
#[derive(Debug, Default, Args)]
pub struct SettingFlags {
    /// TOML file with any of the settings below.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Coarse (transmitted) layers.
    #[arg(long, global = true)]
    pub nc: Option<usize>,
    /// Fine (synthesized) layers.
    #[arg(long, global = true)]
    pub nf: Option<usize>,
    /// Total quantizer layers; must equal nc + nf.
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true)]
    pub codebook_size: Option<usize>,
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
    #[arg(long, global = true)]
    pub sampler: Option<Strategy>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub topk: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Token model family for `train`.
    #[arg(long, global = true, value_enum)]
    pub kind: Option<ModelKindArg>,
    /// Context length of the count model, in symbols.
    #[arg(long, global = true)]
    pub order: Option<usize>,
    #[arg(long, global = true)]
    pub kmeans_iters: Option<usize>,
    #[arg(long, global = true)]
    pub blocks: Option<usize>,
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    #[arg(long, global = true)]
    pub width: Option<usize>,
    /// Transformer context in symbols.
    #[arg(long, global = true)]
    pub context: Option<usize>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub warmup: Option<usize>,
    #[arg(long, global = true)]
    pub log_every: Option<usize>,
    #[arg(long, global = true)]
    pub vad_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub vad_slope: Option<f64>,
    #[arg(long, global = true)]
    pub voicing_rule: Option<VoicingRule>,
    /// Keep unvoiced frames in the model context of voiced-only rates.
    #[arg(long, global = true)]
    pub vad_keep_context: bool,
}

type Table = toml::map::Map<String, toml::Value>;

fn put<T: Serialize>(t: &mut Table, key: &str, v: Option<T>) {
    if let Some(v) = v {
        t.insert(
            key.into(),
            toml::Value::try_from(v).expect("setting serializes"),
        );
    }
}

impl SettingFlags {
    fn to_table(&self) -> Table {
        let mut t = Table::new();
        put(&mut t, "nc", self.nc);
        put(&mut t, "nf", self.nf);
        put(&mut t, "layers", self.layers);
        put(&mut t, "codebook_size", self.codebook_size);
        put(&mut t, "mode", self.mode);
        put(&mut t, "sampler", self.sampler);
        put(&mut t, "temperature", self.temperature);
        put(&mut t, "topk", self.topk);
        put(&mut t, "seed", self.seed);
        put(&mut t, "kind", self.kind);
        put(&mut t, "order", self.order);
        put(&mut t, "kmeans_iters", self.kmeans_iters);
        let mut tf = Table::new();
        put(&mut tf, "n_blocks", self.blocks);
        put(&mut tf, "n_heads", self.heads);
        put(&mut tf, "width", self.width);
        put(&mut tf, "context", self.context);
        put(&mut tf, "steps", self.steps);
        put(&mut tf, "batch_size", self.batch_size);
        put(&mut tf, "learning_rate", self.lr);
        put(&mut tf, "warmup_steps", self.warmup);
        put(&mut tf, "log_every", self.log_every);
        if !tf.is_empty() {
            t.insert("transformer".into(), tf.into());
        }
        let mut vad = Table::new();
        put(&mut vad, "threshold_dbfs", self.vad_threshold);
        put(&mut vad, "slope_db", self.vad_slope);
        put(&mut vad, "rule", self.voicing_rule);
        if self.vad_keep_context {
            vad.insert("skip_unvoiced_context".into(), false.into());
        }
        if !vad.is_empty() {
            t.insert("vad".into(), vad.into());
        }
        t
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn read_file(path: &Path) -> anyhow::Result<Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Usage(format!("cannot read config file {}: {e}", path.display())))?;
    let table: Table =
        toml::from_str(&text).map_err(|e| Usage(format!("config file {}: {e}", path.display())))?;
    Ok(table)
}

/// Resolves the effective settings and the layer split.
pub fn resolve(flags: &SettingFlags) -> anyhow::Result<Settings> {
    let mut table = toml::Value::try_from(Settings::default())
        .context("serializing defaults")?
        .as_table()
        .cloned()
        .unwrap_or_default();
    let mut given = Table::new();
    if let Some(path) = &flags.config {
        merge(&mut given, read_file(path)?);
    }
    merge(&mut given, flags.to_table());
    let has = |k: &str| given.contains_key(k);
    let (has_layers, has_nc, has_nf) = (has("layers"), has("nc"), has("nf"));
    merge(&mut table, given);
    let mut s: Settings = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Usage(format!("invalid settings: {e}")))?;
    if let Some(layers) = s.layers {
        match (has_layers, has_nc, has_nf) {
            (true, _, false) => {
                s.nf = layers.checked_sub(s.nc).ok_or_else(|| {
                    Usage(format!("--layers {layers} is fewer than --nc {}", s.nc))
                })?
            }
            (true, false, true) => {
                s.nc = layers.checked_sub(s.nf).ok_or_else(|| {
                    Usage(format!("--layers {layers} is fewer than --nf {}", s.nf))
                })?
            }
            _ => {}
        }
        if s.nc + s.nf != layers {
            return Err(Usage(format!("nc {} + nf {} != layers {layers}", s.nc, s.nf)).into());
        }
    }
    s.layers = Some(s.nc + s.nf);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_layers() {
        let s = resolve(&SettingFlags::default()).unwrap();
        assert_eq!((s.nc, s.nf, s.layers), (4, 8, Some(12)));
    }

    #[test]
    fn flags_beat_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 5\nnc = 2\n[transformer]\nwidth = 64\n").unwrap();
        let flags = SettingFlags {
            config: Some(path),
            seed: Some(9),
            steps: Some(3),
            ..Default::default()
        };
        let s = resolve(&flags).unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.nc, 2);
        assert_eq!(s.transformer.width, 64);
        assert_eq!(s.transformer.steps, 3);
        assert_eq!(
            s.transformer.n_blocks,
            TransformerConfig::default().n_blocks
        );
    }

    #[test]
    fn layers_fill_the_missing_split() {
        let flags = SettingFlags {
            layers: Some(3),
            nc: Some(1),
            ..Default::default()
        };
        let s = resolve(&flags).unwrap();
        assert_eq!((s.nc, s.nf), (1, 2));
        let flags = SettingFlags {
            layers: Some(3),
            nc: Some(1),
            nf: Some(1),
            ..Default::default()
        };
        assert!(resolve(&flags).is_err());
    }

    #[test]
    fn unknown_file_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "sede = 5\n").unwrap();
        let flags = SettingFlags {
            config: Some(path),
            ..Default::default()
        };
        assert!(resolve(&flags).is_err());
    }
}
