//! Synthetic test signals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::frontend::Waveform;

fn samples(secs: f64, sample_rate: u32) -> usize {
    (secs * sample_rate as f64).round() as usize
}

pub fn sine(freq: f64, amplitude: f64, secs: f64, sample_rate: u32) -> Waveform {
    let n = samples(secs, sample_rate);
    let w = 2.0 * std::f64::consts::PI * freq / sample_rate as f64;
    Waveform {
        samples: (0..n)
            .map(|i| (amplitude * (w * i as f64).sin()) as f32)
            .collect(),
        sample_rate,
    }
}

/// Gaussian noise with the given RMS, clipped to `[-1, 1]`.
pub fn noise(rms: f64, secs: f64, sample_rate: u32, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, rms).unwrap();
    Waveform {
        samples: (0..samples(secs, sample_rate))
            .map(|_| (normal.sample(&mut rng) as f32).clamp(-1.0, 1.0))
            .collect(),
        sample_rate,
    }
}

/// Alternating voiced and silent segments of 0.2 to 0.6 s. Voiced segments
/// are harmonic stacks with a gliding pitch and a smooth envelope; silent
/// ones are digital zero. Starts voiced.
pub fn speech_like(secs: f64, sample_rate: u32, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples(secs, sample_rate);
    let sr = sample_rate as f64;
    let mut out = Vec::with_capacity(n);
    let mut voiced = true;
    while out.len() < n {
        let len = ((rng.random_range(0.2..0.6) * sr) as usize).min(n - out.len());
        if voiced {
            let f0 = rng.random_range(100.0..220.0);
            let glide = rng.random_range(-0.3..0.3);
            let amp = rng.random_range(0.15..0.4);
            let harmonics: Vec<f64> = (1..=8)
                .map(|h| rng.random_range(0.2..1.0) / h as f64)
                .collect();
            let mut phase = 0.0f64;
            for i in 0..len {
                let t = i as f64 / len as f64;
                let f = f0 * (1.0 + glide * t);
                phase += 2.0 * std::f64::consts::PI * f / sr;
                let env = (std::f64::consts::PI * t).sin().powf(0.3);
                let s: f64 = harmonics
                    .iter()
                    .enumerate()
                    .map(|(h, &a)| a * ((h + 1) as f64 * phase).sin())
                    .sum();
                out.push((amp * env * s).clamp(-1.0, 1.0) as f32);
            }
        } else {
            out.extend(std::iter::repeat_n(0.0f32, len));
        }
        voiced = !voiced;
    }
    Waveform {
        samples: out,
        sample_rate,
    }
}
