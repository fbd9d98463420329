use super::*;
use crate::config::CodecConfig;
use crate::probmodel::train_context_model;
use crate::signals::{noise, sine};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SR: u32 = 16_000;

fn cfg(nc: usize, n_coarse: usize) -> CodecConfig {
    CodecConfig::new(nc, n_coarse, 0, 320).unwrap()
}

fn random_grid(rng: &mut ChaCha8Rng, c: &CodecConfig, frames: usize) -> TokenGrid {
    let codes = (0..frames * c.n_layers())
        .map(|_| (rng.random::<f64>().powi(2) * c.codebook_size as f64) as u32)
        .collect();
    TokenGrid::new(codes, *c).unwrap()
}

fn track(voiced: Vec<bool>) -> VadTrack {
    VadTrack {
        probs_10ms: voiced
            .iter()
            .flat_map(|&v| [f64::from(u8::from(v)); 2])
            .collect(),
        voiced_20ms: voiced,
    }
}

#[test]
fn silence_and_full_scale() {
    let c = VadConfig::default();
    let silent = Waveform::new(vec![0.0; SR as usize], SR).unwrap();
    let p = vad_probs(&silent, &c).unwrap();
    assert_eq!(p.len(), 100);
    assert!(p.iter().all(|&x| x < 0.01));
    let loud = sine(440.0, 1.0, 1.0, SR);
    assert!(vad_probs(&loud, &c).unwrap().iter().all(|&x| x > 0.99));
}

#[test]
fn minus_forty_dbfs_noise_sits_at_the_midpoint() {
    let w = noise(0.01, 2.0, SR, 3);
    let p = vad_probs(&w, &VadConfig::default()).unwrap();
    for &x in &p {
        assert!((x - 0.5).abs() < 0.1, "{x}");
    }
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    assert!((mean - 0.5).abs() < 0.03);
}

#[test]
fn level_measurement() {
    assert_eq!(rms_dbfs(&[0.0; 160]), SILENCE_DBFS);
    assert!((rms_dbfs(&[1.0; 160])).abs() < 1e-12);
    assert!((rms_dbfs(&[0.1, -0.1]) + 20.0).abs() < 1e-5);
}

#[test]
fn min_rule_examples() {
    let c = VadConfig::default();
    assert_eq!(frame_voicing(&[0.9, 0.9], &c), vec![true]);
    assert_eq!(frame_voicing(&[0.9, 0.7], &c), vec![false]);
    assert_eq!(
        frame_voicing(&[0.81, 0.81, 0.80, 0.99], &c),
        vec![true, false]
    );
    assert_eq!(frame_voicing(&[0.9, 0.9, 0.9], &c).len(), 1);
}

#[test]
fn alternative_rules() {
    let mean = VadConfig {
        rule: VoicingRule::Mean,
        ..Default::default()
    };
    assert_eq!(frame_voicing(&[0.95, 0.7], &mean), vec![true]);
    let product = VadConfig {
        rule: VoicingRule::Product,
        ..Default::default()
    };
    assert_eq!(frame_voicing(&[0.9, 0.9], &product), vec![true]);
    assert_eq!(frame_voicing(&[0.85, 0.9], &product), vec![false]);
}

#[test]
fn track_lengths_match_codec_frames() {
    let w = sine(200.0, 0.5, 1.013, SR);
    let t = VadTrack::from_waveform(&w, &VadConfig::default()).unwrap();
    assert_eq!(t.probs_10ms.len(), w.len() / 160);
    assert_eq!(t.voiced_20ms.len(), w.len() / 320);
}

#[test]
fn all_voiced_scenarios_agree() {
    let c = cfg(32, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = random_grid(&mut rng, &c, 80);
    let m = train_context_model(std::slice::from_ref(&g), Role::Coarse, 2, &c).unwrap();
    let r = vad_rate_report(&g, &m, &track(vec![true; 80]), &VadConfig::default(), 50.0).unwrap();
    assert_eq!(r.voiced_only, r.zero_unvoiced);
    let full = rate_report(std::slice::from_ref(&g), &m, None, 50.0).unwrap();
    assert!((r.voiced_only.entropy_bps - full.entropy_bps).abs() < 1e-9);
    assert!((r.voiced_only.huffman_bps - full.huffman_bps).abs() < 1e-9);
}

#[test]
fn half_voiced_uniform_model_halves_the_rate() {
    let c = cfg(1024, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_grid(&mut rng, &c, 60);
    let m = TokenModel::uniform(Role::Coarse, c);
    let voiced: Vec<bool> = (0..60).map(|i| i % 2 == 0).collect();
    let r = vad_rate_report(&g, &m, &track(voiced), &VadConfig::default(), 50.0).unwrap();
    assert!((r.voiced_only.entropy_bps - 2000.0).abs() < 1e-6);
    assert!((r.zero_unvoiced.entropy_bps - 1000.0).abs() < 1e-6);
    assert!((r.zero_unvoiced.huffman_bps * 2.0 - r.voiced_only.huffman_bps).abs() < 1e-6);
    assert_eq!(r.raw_bps, 2000.0);
}

#[test]
fn gating_never_raises_the_rate() {
    let c = cfg(32, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random_grid(&mut rng, &c, 100);
    let m = train_context_model(std::slice::from_ref(&g), Role::Coarse, 1, &c).unwrap();
    for skip in [true, false] {
        for _ in 0..20 {
            let voiced: Vec<bool> = (0..100).map(|_| rng.random_bool(0.6)).collect();
            let vc = VadConfig {
                skip_unvoiced_context: skip,
                ..Default::default()
            };
            let r = vad_rate_report(&g, &m, &track(voiced), &vc, 50.0).unwrap();
            assert!(r.voiced_frames < 100);
            assert!(r.zero_unvoiced.entropy_bps < r.voiced_only.entropy_bps);
            assert!(r.zero_unvoiced.huffman_bps < r.voiced_only.huffman_bps);
        }
    }
}

#[test]
fn nothing_voiced_costs_nothing() {
    let c = cfg(16, 1);
    let g = TokenGrid::new(vec![3; 10], c).unwrap();
    let m = TokenModel::uniform(Role::Coarse, c);
    let r = vad_rate_report(&g, &m, &track(vec![false; 10]), &VadConfig::default(), 50.0).unwrap();
    assert_eq!(r.voiced_only, ScenarioRates::default());
    assert_eq!(r.zero_unvoiced, ScenarioRates::default());
}

#[test]
fn track_length_must_match() {
    let c = cfg(16, 1);
    let g = TokenGrid::new(vec![3; 10], c).unwrap();
    let m = TokenModel::uniform(Role::Coarse, c);
    let r = vad_rate_report(&g, &m, &track(vec![true; 9]), &VadConfig::default(), 50.0);
    assert!(matches!(r, Err(CodecError::ShapeError(_))));
}

#[test]
fn raw_rate_law() {
    for n in [1, 2, 4, 8, 12] {
        assert_eq!(raw_bps(n, 50.0, 10), 500.0 * n as f64);
    }
    let c = cfg(1024, 4);
    let g = TokenGrid::new(vec![0; 4 * 50], c).unwrap();
    let r = rate_report(&[g], &TokenModel::uniform(Role::Coarse, c), None, 50.0).unwrap();
    assert_eq!(r.raw_bps, 2000.0);
    assert!((r.entropy_bps - 2000.0).abs() < 1e-6);
    assert!((r.duration_secs - 1.0).abs() < 1e-12);
}

#[test]
fn uniform_profile_is_log2_nc() {
    let c = cfg(1024, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = random_grid(&mut rng, &c, 12);
    let rows = confidence_profile(&TokenModel::uniform(Role::Coarse, c), &g, None).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows
        .iter()
        .all(|r| (r.mean_entropy_bits - 10.0).abs() < 1e-9 && r.voiced_flag));
}

#[test]
fn trained_profile_is_confident_and_bounded() {
    let c = cfg(16, 1);
    let codes: Vec<u32> = (0..16_000).map(|i| i % 16).collect();
    let g = TokenGrid::new(codes, c).unwrap();
    let m = train_context_model(std::slice::from_ref(&g), Role::Coarse, 1, &c).unwrap();
    let voiced: Vec<bool> = (0..16_000).map(|i| i % 3 != 0).collect();
    let rows = confidence_profile(&m, &g, Some(&voiced)).unwrap();
    assert!(rows[1..].iter().all(|r| r.mean_entropy_bits < 1.0));
    assert!(rows
        .iter()
        .all(|r| (0.0..=4.0).contains(&r.mean_entropy_bits)));
    assert!(!rows[3].voiced_flag && rows[4].voiced_flag);
    let csv = profile_csv(&rows);
    assert!(csv.starts_with("frame_index,mean_entropy_bits,voiced_flag\n0,"));
    assert_eq!(
        csv,
        profile_csv(&confidence_profile(&m, &g, Some(&voiced)).unwrap())
    );
}

#[test]
fn report_csv_and_json_carry_the_same_fields() {
    let c = cfg(16, 2);
    let g = TokenGrid::new(vec![1; 40], c).unwrap();
    let r = rate_report(&[g], &TokenModel::uniform(Role::Coarse, c), None, 50.0).unwrap();
    let csv = rate_csv(std::slice::from_ref(&r));
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    let keys: Vec<&str> = json
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    let mut sorted_header = header.clone();
    sorted_header.sort_unstable();
    let mut sorted_keys = keys.clone();
    sorted_keys.sort_unstable();
    assert_eq!(sorted_header, sorted_keys);
    assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), header.len());
}
