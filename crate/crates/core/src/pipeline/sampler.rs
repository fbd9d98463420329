use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CodecError, Result};
use crate::probmodel::StepDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    #[default]
    Temperature,
    TopK,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "temperature" => Ok(Strategy::Temperature),
            "topk" | "top-k" => Ok(Strategy::TopK),
            _ => Err(format!(
                "unknown sampler {s:?} (expected greedy, temperature or topk)"
            )),
        }
    }
}

/// How the receiver draws fine tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub temperature: f64,
    /// Candidates kept by [`Strategy::TopK`].
    pub k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Temperature,
            temperature: 1.0,
            k: 50,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            strategy: Strategy::Greedy,
            ..Self::default()
        }
    }

    pub fn validate(&self, codebook_size: usize) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(CodecError::InvalidConfig(format!(
                "temperature must be finite and positive, got {}",
                self.temperature
            )));
        }
        if self.strategy == Strategy::TopK && !(1..=codebook_size).contains(&self.k) {
            return Err(CodecError::InvalidConfig(format!(
                "top-k needs k in [1, {codebook_size}], got {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Seeded draw state; one uniform variate per stochastic draw.
#[derive(Debug, Clone)]
pub struct Sampler {
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Self {
        Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn draw(&mut self, d: &StepDistribution) -> u32 {
        let p = d.probs();
        let candidates: Vec<usize> = match self.cfg.strategy {
            Strategy::Greedy => return d.argmax(),
            Strategy::Temperature => (0..p.len()).collect(),
            Strategy::TopK => {
                let mut idx: Vec<usize> = (0..p.len()).collect();
                idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
                idx.truncate(self.cfg.k);
                idx.sort_unstable();
                idx
            }
        };
        // Tempered weights relative to the largest candidate, to stay finite.
        let inv_t = 1.0 / self.cfg.temperature;
        let top = candidates.iter().map(|&i| p[i]).fold(0.0, f64::max);
        let w: Vec<f64> = candidates
            .iter()
            .map(|&i| (p[i] / top).powf(inv_t))
            .collect();
        let total: f64 = w.iter().sum();
        let u = self.rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (&i, &wi) in candidates.iter().zip(&w) {
            acc += wi;
            if u < acc {
                return i as u32;
            }
        }
        // Rounding left `u` past the last bucket.
        *candidates.iter().rev().find(|&&i| p[i] > 0.0).unwrap() as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(w: &[f64]) -> StepDistribution {
        StepDistribution::from_weights(w).unwrap()
    }

    #[test]
    fn greedy_is_argmax() {
        let mut s = Sampler::new(SamplerConfig::greedy());
        assert_eq!(s.draw(&dist(&[0.1, 0.5, 0.4])), 1);
        assert_eq!(s.draw(&dist(&[0.5, 0.5, 0.0])), 0);
    }

    #[test]
    fn top1_matches_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = Sampler::new(SamplerConfig {
            strategy: Strategy::TopK,
            k: 1,
            temperature: 3.0,
            seed: 9,
        });
        for _ in 0..500 {
            let w: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
            let d = dist(&w);
            assert_eq!(s.draw(&d), d.argmax());
        }
    }

    #[test]
    fn frequencies_follow_the_distribution() {
        let d = dist(&[0.6, 0.3, 0.1]);
        let mut s = Sampler::new(SamplerConfig::default());
        let mut counts = [0usize; 3];
        let n = 30_000;
        for _ in 0..n {
            counts[s.draw(&d) as usize] += 1;
        }
        for (c, p) in counts.iter().zip(d.probs()) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() < 4.0 * se, "{counts:?}");
        }
    }

    #[test]
    fn top_k_never_leaves_the_candidates() {
        let d = dist(&[0.05, 0.4, 0.05, 0.3, 0.2]);
        let mut s = Sampler::new(SamplerConfig {
            strategy: Strategy::TopK,
            k: 2,
            ..SamplerConfig::default()
        });
        for _ in 0..2000 {
            assert!([1, 3].contains(&s.draw(&d)));
        }
    }

    #[test]
    fn low_temperature_sharpens() {
        let d = dist(&[0.45, 0.55]);
        let mut s = Sampler::new(SamplerConfig {
            temperature: 0.01,
            ..SamplerConfig::default()
        });
        assert!((0..1000).all(|_| s.draw(&d) == 1));
    }

    #[test]
    fn validation() {
        assert!(SamplerConfig {
            temperature: 0.0,
            ..Default::default()
        }
        .validate(16)
        .is_err());
        assert!(SamplerConfig {
            temperature: f64::INFINITY,
            ..Default::default()
        }
        .validate(16)
        .is_err());
        let topk = SamplerConfig {
            strategy: Strategy::TopK,
            k: 17,
            ..Default::default()
        };
        assert!(topk.validate(16).is_err());
        assert!(SamplerConfig { k: 16, ..topk }.validate(16).is_ok());
    }
}
