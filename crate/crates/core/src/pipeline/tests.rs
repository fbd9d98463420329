use super::*;
use crate::entropy::decode_stream;
use crate::probmodel::{next_distribution, train_context_model, Flattening, SymbolContext};
use crate::rvq::fit_codebooks;
use crate::signals::speech_like;
use std::sync::OnceLock;

const SR: u32 = 16_000;

struct Fixture {
    cfg: CodecConfig,
    cb: Codebooks,
    coarse: TokenModel,
    fine: TokenModel,
    audio: Waveform,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = CodecConfig::new(16, 2, 2, 320).unwrap();
        let train: Vec<Waveform> = (0..4).map(|s| speech_like(3.0, SR, s)).collect();
        let fcfg = frontend_config(&cfg, SR);
        let seqs: Vec<_> = train.iter().map(|w| analyze(w, &fcfg).unwrap()).collect();
        let cb = fit_codebooks(&seqs, &cfg, 1).unwrap();
        let grids: Vec<_> = train
            .iter()
            .map(|w| tokenize(w, &cb, &cfg).unwrap())
            .collect();
        let coarse = train_context_model(&grids, Role::Coarse, 2, &cfg).unwrap();
        let fine = train_context_model(&grids, Role::Fine, 2, &cfg).unwrap();
        Fixture {
            cfg,
            cb,
            coarse,
            fine,
            audio: speech_like(2.0, SR, 99),
        }
    })
}

#[test]
fn one_second_is_fifty_frames() {
    let f = fixture();
    let w = speech_like(1.0, SR, 5);
    let b = encode(&w, &f.cb, &f.coarse, &f.cfg, Mode::Huffman).unwrap();
    assert_eq!(b.header.frame_count, 50);
    assert_eq!(b.header.symbol_count, 100);
    assert_eq!(
        (b.header.sample_rate, b.header.hop, b.header.n_fine),
        (SR, 320, 2)
    );
    let bps = b.bits_per_second();
    assert!((bps - b.bit_count as f64).abs() < 1e-9);
}

#[test]
fn coarse_layers_survive_exactly() {
    let f = fixture();
    let sent = tokenize(&f.audio, &f.cb, &f.cfg).unwrap();
    for mode in [Mode::Huffman, Mode::Range] {
        let b = Bitstream::from_bytes(
            &encode(&f.audio, &f.cb, &f.coarse, &f.cfg, mode)
                .unwrap()
                .to_bytes(),
        )
        .unwrap();
        let (got, w) = decode(
            &b,
            &f.cb,
            &f.coarse,
            Some(&f.fine),
            SamplerConfig::default(),
        )
        .unwrap();
        for n in 0..sent.n_frames() {
            assert_eq!(&got.frame(n)[..2], &sent.frame(n)[..2]);
        }
        assert_eq!(w.len(), sent.n_frames() * 320);
    }
}

#[test]
fn no_fine_layers_is_the_direct_path() {
    let f = fixture();
    let cfg = CodecConfig::new(16, 2, 0, 320).unwrap();
    let cb = Codebooks::new(16, 320, f.cb.layers[..2].to_vec()).unwrap();
    let coarse = {
        let g = tokenize(&f.audio, &cb, &cfg).unwrap();
        train_context_model(&[g], Role::Coarse, 1, &cfg).unwrap()
    };
    let b = encode(&f.audio, &cb, &coarse, &cfg, Mode::Range).unwrap();
    let (grid, w) = decode(&b, &cb, &coarse, None, SamplerConfig::default()).unwrap();
    let direct_grid = tokenize(&f.audio, &cb, &cfg).unwrap();
    assert_eq!(grid, direct_grid);
    let fcfg = frontend_config(&cfg, SR);
    let direct = synthesize(&dequantize_grid(&direct_grid, &cb, 2, fcfg).unwrap()).unwrap();
    assert_eq!(w, direct);
}

#[test]
fn same_seed_same_output() {
    let f = fixture();
    let b = encode(&f.audio, &f.cb, &f.coarse, &f.cfg, Mode::Huffman).unwrap();
    let s = SamplerConfig {
        seed: 17,
        ..SamplerConfig::default()
    };
    let a = decode(&b, &f.cb, &f.coarse, Some(&f.fine), s).unwrap();
    let c = decode(&b, &f.cb, &f.coarse, Some(&f.fine), s).unwrap();
    assert_eq!(a, c);
}

#[test]
fn greedy_matches_step_through_oracle() {
    let f = fixture();
    let full = tokenize(&f.audio, &f.cb, &f.cfg).unwrap().prefix(3);
    let got = sample_fine(&full, &f.fine, SamplerConfig::greedy()).unwrap();
    let flat = Flattening::new(Role::Fine, &f.cfg);
    let mut history: Vec<u32> = Vec::new();
    for n in 0..3 {
        for k in 0..4 {
            let expected = if k < 2 {
                full.get(n, k)
            } else {
                next_distribution(&f.fine, &SymbolContext::from_prefix(&history, &flat))
                    .unwrap()
                    .argmax()
            };
            assert_eq!(got.get(n, k), expected, "({n}, {k})");
            history.push(expected);
        }
    }
}

#[test]
fn top1_is_greedy_and_fine_synthesis_is_causal() {
    let f = fixture();
    let g = tokenize(&f.audio, &f.cb, &f.cfg).unwrap();
    let greedy = sample_fine(&g, &f.fine, SamplerConfig::greedy()).unwrap();
    let top1 = SamplerConfig {
        strategy: Strategy::TopK,
        k: 1,
        seed: 3,
        ..Default::default()
    };
    assert_eq!(sample_fine(&g, &f.fine, top1).unwrap(), greedy);

    let s = SamplerConfig {
        seed: 4,
        ..Default::default()
    };
    let base = sample_fine(&g, &f.fine, s).unwrap();
    let mut later = g.clone();
    for m in 30..g.n_frames() {
        later.set(m, 0, (g.get(m, 0) + 5) % 16).unwrap();
    }
    let changed = sample_fine(&later, &f.fine, s).unwrap();
    assert_eq!(base.codes()[..30 * 4], changed.codes()[..30 * 4]);
    // Coarse entries are never touched.
    for n in 0..g.n_frames() {
        assert_eq!(&base.frame(n)[..2], &g.frame(n)[..2]);
    }
}

#[test]
fn sample_fine_checks_the_role() {
    let f = fixture();
    let g = tokenize(&f.audio, &f.cb, &f.cfg).unwrap();
    assert!(matches!(
        sample_fine(&g, &f.coarse, SamplerConfig::default()),
        Err(CodecError::ContextError(_))
    ));
}

#[test]
fn missing_fine_model_zero_fills() {
    let f = fixture();
    let b = encode(&f.audio, &f.cb, &f.coarse, &f.cfg, Mode::Range).unwrap();
    let (grid, w) = decode(&b, &f.cb, &f.coarse, None, SamplerConfig::default()).unwrap();
    let sent = tokenize(&f.audio, &f.cb, &f.cfg).unwrap();
    for n in 0..grid.n_frames() {
        assert_eq!(grid.frame(n), &[sent.get(n, 0), sent.get(n, 1), 0, 0]);
    }
    assert_eq!(w, render(&grid, &f.cb, 2, SR).unwrap());
}

#[test]
fn wrong_models_are_rejected() {
    let f = fixture();
    let mut b = encode(&f.audio, &f.cb, &f.coarse, &f.cfg, Mode::Huffman).unwrap();
    let other = TokenModel::uniform(Role::Coarse, f.cfg);
    assert!(matches!(
        decode(&b, &f.cb, &other, None, SamplerConfig::default()),
        Err(CodecError::ModelMismatch { .. })
    ));
    b.header.fine_model_id = TokenModel::uniform(Role::Fine, f.cfg).model_id();
    assert!(matches!(
        decode(
            &b,
            &f.cb,
            &f.coarse,
            Some(&f.fine),
            SamplerConfig::default()
        ),
        Err(CodecError::ModelMismatch { .. })
    ));
    b.header.fine_model_id = f.fine.model_id();
    assert!(decode(
        &b,
        &f.cb,
        &f.coarse,
        Some(&f.fine),
        SamplerConfig::default()
    )
    .is_ok());
    assert!(encode(&f.audio, &f.cb, &f.fine, &f.cfg, Mode::Huffman).is_err());
}

#[test]
fn streaming_matches_batch() {
    let f = fixture();
    let batch = encode(&f.audio, &f.cb, &f.coarse, &f.cfg, Mode::Range).unwrap();
    let mut enc = StreamingEncoder::new(&f.cb, &f.coarse, &f.cfg, SR, Mode::Range).unwrap();
    let mut rows = Vec::new();
    for chunk in f.audio.samples.chunks(123) {
        rows.extend(enc.push_samples(chunk).unwrap());
    }
    let streamed = enc.finish();
    assert_eq!(streamed, batch);
    assert_eq!(
        rows.concat(),
        tokenize(&f.audio, &f.cb, &f.cfg).unwrap().codes()
    );

    let s = SamplerConfig {
        seed: 8,
        ..Default::default()
    };
    let (grid, w) = decode(&batch, &f.cb, &f.coarse, Some(&f.fine), s).unwrap();
    let mut dec = StreamingDecoder::new(&batch, &f.cb, &f.coarse, Some(&f.fine), s).unwrap();
    let mut codes = Vec::new();
    let mut samples = Vec::new();
    while let Some(fr) = dec.next_frame().unwrap() {
        codes.extend(fr.codes);
        samples.extend(fr.samples);
    }
    samples.extend(dec.finish().unwrap());
    assert_eq!(codes, grid.codes());
    assert_eq!(samples, w.samples);
}

#[test]
fn prefix_decoding_is_causal() {
    let f = fixture();
    let s = SamplerConfig {
        seed: 2,
        ..Default::default()
    };
    let full = encode(&f.audio, &f.cb, &f.coarse, &f.cfg, Mode::Huffman).unwrap();
    let (g_full, w_full) = decode(&full, &f.cb, &f.coarse, Some(&f.fine), s).unwrap();
    let n = 40;
    let head = Waveform::new(f.audio.samples[..n * 320].to_vec(), SR).unwrap();
    let part = encode(&head, &f.cb, &f.coarse, &f.cfg, Mode::Huffman).unwrap();
    let (g_part, w_part) = decode(&part, &f.cb, &f.coarse, Some(&f.fine), s).unwrap();
    assert_eq!(g_part.codes(), &g_full.codes()[..n * 4]);
    // The last block of the prefix lacks its overlap partner; earlier ones agree.
    assert_eq!(
        w_part.samples[..(n - 1) * 320],
        w_full.samples[..(n - 1) * 320]
    );
}

#[test]
fn silence_codes_cheaply() {
    let f = fixture();
    let silence = Waveform::new(vec![0.0; SR as usize], SR).unwrap();
    let b = encode(&silence, &f.cb, &f.coarse, &f.cfg, Mode::Range).unwrap();
    let raw = f.cfg.n_coarse as f64 * 50.0 * f.cfg.bits_per_code() as f64;
    assert!(
        b.bits_per_second() < raw / 4.0,
        "{} vs raw {raw}",
        b.bits_per_second()
    );
    assert_eq!(decode_stream(&b, &f.coarse).unwrap().len(), 100);
}

#[test]
fn truncated_streams_fail_to_decode() {
    let f = fixture();
    for mode in [Mode::Huffman, Mode::Range] {
        let b = encode(&f.audio, &f.cb, &f.coarse, &f.cfg, mode).unwrap();
        let bytes = b.to_bytes();
        let cut = Bitstream::from_bytes(&bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            decode(&cut, &f.cb, &f.coarse, None, SamplerConfig::default()),
            Err(CodecError::CorruptStream(_))
        ));
    }
}
