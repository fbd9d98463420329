use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokencodec::entropy::{huffman_codebook, quantize_distribution, RangeEncoder};
use tokencodec::probmodel::{flatten_coarse, train_transformer, Role, TransformerConfig};
use tokencodec::rvq::{fit_codebooks_from_vectors, quantize, KMeansParams};
use tokencodec::signals::speech_like;
use tokencodec::{
    analyze, encode_stream, synthesize, CodecConfig, FrontendConfig, Mode, StepDistribution,
    TokenGrid,
};

fn frontend(c: &mut Criterion) {
    let w = speech_like(1.0, 16_000, 1);
    let cfg = FrontendConfig::default();
    let e = analyze(&w, &cfg).unwrap();
    c.bench_function("mdct_analyze_1s", |b| {
        b.iter(|| analyze(black_box(&w), &cfg).unwrap())
    });
    c.bench_function("mdct_synthesize_1s", |b| {
        b.iter(|| synthesize(black_box(&e)).unwrap())
    });
}

fn rvq(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = CodecConfig::new(1024, 4, 8, 320).unwrap();
    let data: Vec<f32> = (0..2048 * 320)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let params = KMeansParams {
        max_iters: 2,
        ..Default::default()
    };
    let cb = fit_codebooks_from_vectors(&data, &cfg, 0, &params).unwrap();
    let v = &data[..320];
    c.bench_function("rvq_quantize_12x1024", |b| {
        b.iter(|| quantize(black_box(v), &cb, 12).unwrap())
    });
}

fn entropy(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w: Vec<f64> = (0..1024).map(|_| rng.random::<f64>().powi(4)).collect();
    let q = quantize_distribution(&StepDistribution::from_weights(&w).unwrap());
    c.bench_function("quantize_distribution_1024", |b| {
        let d = StepDistribution::from_weights(&w).unwrap();
        b.iter(|| quantize_distribution(black_box(&d)))
    });
    c.bench_function("huffman_build_1024", |b| {
        b.iter(|| huffman_codebook(black_box(&q)))
    });
    let symbols: Vec<u32> = (0..10_000).map(|_| rng.random_range(0..1024)).collect();
    c.bench_function("range_encode_10k_fixed_model", |b| {
        b.iter_batched(
            RangeEncoder::new,
            |mut enc| {
                for &s in &symbols {
                    enc.encode(&q, s);
                }
                enc.finish()
            },
            BatchSize::SmallInput,
        )
    });
}

fn transformer(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = CodecConfig::new(1024, 4, 0, 320).unwrap();
    let g = TokenGrid::new(
        (0..200 * 4).map(|_| rng.random_range(0..1024)).collect(),
        cfg,
    )
    .unwrap();
    let tcfg = TransformerConfig {
        n_blocks: 2,
        n_heads: 4,
        width: 64,
        context: 256,
        steps: 1,
        batch_size: 1,
        ..Default::default()
    };
    let (m, _) = train_transformer(std::slice::from_ref(&g), Role::Coarse, &cfg, &tcfg, 0).unwrap();
    let syms = flatten_coarse(&g);
    c.bench_function("transformer_encode_50_frames", |b| {
        b.iter(|| encode_stream(black_box(&syms[..200]), &m, Mode::Range).unwrap())
    });
}

criterion_group!(benches, frontend, rvq, entropy, transformer);
criterion_main!(benches);
