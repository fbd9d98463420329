//! Residual vector quantization.
//!
//! Layer `l` quantizes what is left after subtracting the codewords chosen by
//! layers `< l`, so a frame becomes a coarse-to-fine list of codes. Every
//! layer after the first reserves codeword 0 as the zero vector: the nearest
//! codeword can then never be farther from the residual than the residual
//! itself, and reconstruction error is non-increasing in the layer count.

mod io;
mod kmeans;

use serde::{Deserialize, Serialize};

use crate::config::CodecConfig;
use crate::error::{CodecError, Result};
use crate::frontend::EmbeddingSequence;
pub use io::{read_codebooks, write_codebooks, CODEBOOK_MAGIC, CODEBOOK_VERSION};
pub use kmeans::KMeansParams;

/// Per-layer codeword tables, each `codebook_size x embed_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    pub codebook_size: usize,
    pub embed_dim: usize,
    pub layers: Vec<Vec<f32>>,
}

impl Codebooks {
    pub fn new(codebook_size: usize, embed_dim: usize, layers: Vec<Vec<f32>>) -> Result<Self> {
        for (l, table) in layers.iter().enumerate() {
            if table.len() != codebook_size * embed_dim {
                return Err(CodecError::ShapeError(format!(
                    "layer {l} has {} values, expected {codebook_size} x {embed_dim}",
                    table.len()
                )));
            }
            if table.iter().any(|v| !v.is_finite()) {
                return Err(CodecError::Format(format!(
                    "layer {l} has non-finite entries"
                )));
            }
        }
        Ok(Self {
            codebook_size,
            embed_dim,
            layers,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn codeword(&self, layer: usize, code: usize) -> &[f32] {
        let d = self.embed_dim;
        &self.layers[layer][code * d..(code + 1) * d]
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.embed_dim {
            return Err(CodecError::ShapeError(format!(
                "vector has dim {len}, codebooks have dim {}",
                self.embed_dim
            )));
        }
        Ok(())
    }

    fn check_geometry(&self, cfg: &CodecConfig) -> Result<()> {
        if cfg.codebook_size != self.codebook_size
            || cfg.embed_dim != self.embed_dim
            || cfg.n_layers() > self.n_layers()
        {
            return Err(CodecError::InvalidConfig(format!(
                "codebooks ({} x {} x {} layers) do not fit config {cfg:?}",
                self.codebook_size,
                self.embed_dim,
                self.n_layers()
            )));
        }
        Ok(())
    }
}

/// Frames x layers matrix of codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    codes: Vec<u32>,
    n_frames: usize,
    config: CodecConfig,
}

impl TokenGrid {
    /// `codes` is row-major, one row of `config.n_layers()` codes per frame.
    pub fn new(codes: Vec<u32>, config: CodecConfig) -> Result<Self> {
        config.validate()?;
        let width = config.n_layers();
        if width == 0 || codes.len() % width != 0 {
            return Err(CodecError::ShapeError(format!(
                "{} codes do not form rows of {width}",
                codes.len()
            )));
        }
        if let Some(i) = codes
            .iter()
            .position(|&c| c as usize >= config.codebook_size)
        {
            return Err(CodecError::InvalidCode {
                layer: i % width,
                code: codes[i],
                size: config.codebook_size,
            });
        }
        Ok(Self {
            n_frames: codes.len() / width,
            codes,
            config,
        })
    }

    pub fn zeros(n_frames: usize, config: CodecConfig) -> Self {
        Self {
            codes: vec![0; n_frames * config.n_layers()],
            n_frames,
            config,
        }
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers()
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    /// Zero-based frame and layer.
    pub fn get(&self, frame: usize, layer: usize) -> u32 {
        self.codes[frame * self.n_layers() + layer]
    }

    pub fn set(&mut self, frame: usize, layer: usize, code: u32) -> Result<()> {
        if code as usize >= self.config.codebook_size {
            return Err(CodecError::InvalidCode {
                layer,
                code,
                size: self.config.codebook_size,
            });
        }
        let w = self.n_layers();
        self.codes[frame * w + layer] = code;
        Ok(())
    }

    pub fn frame(&self, frame: usize) -> &[u32] {
        let w = self.n_layers();
        &self.codes[frame * w..(frame + 1) * w]
    }

    /// Keeps only the frames where `keep` is true.
    pub fn select_frames(&self, keep: &[bool]) -> Result<TokenGrid> {
        if keep.len() != self.n_frames {
            return Err(CodecError::ShapeError(format!(
                "{} flags for {} frames",
                keep.len(),
                self.n_frames
            )));
        }
        let codes = (0..self.n_frames)
            .filter(|&f| keep[f])
            .flat_map(|f| self.frame(f).iter().copied())
            .collect();
        TokenGrid::new(codes, self.config)
    }

    /// First `n` frames.
    pub fn prefix(&self, n: usize) -> TokenGrid {
        let n = n.min(self.n_frames);
        TokenGrid {
            codes: self.codes[..n * self.n_layers()].to_vec(),
            n_frames: n,
            config: self.config,
        }
    }

    /// CSV dump: one row per frame, one column per layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame");
        for l in 0..self.n_layers() {
            out.push_str(&format!(",layer{}", l + 1));
        }
        out.push('\n');
        for f in 0..self.n_frames {
            out.push_str(&f.to_string());
            for &c in self.frame(f) {
                out.push(',');
                out.push_str(&c.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Nearest codeword by squared Euclidean distance; ties go to the lowest index.
fn nearest(residual: &[f64], table: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (j, row) in table.chunks_exact(dim).enumerate() {
        let mut d = 0.0;
        for (&r, &c) in residual.iter().zip(row) {
            let t = r - c as f64;
            d += t * t;
        }
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Greedy residual quantization of one embedding through the first
/// `n_layers` layers. Returns the codes and the final residual.
pub fn quantize_with_residual(
    v: &[f32],
    cb: &Codebooks,
    n_layers: usize,
) -> Result<(Vec<u32>, Vec<f64>)> {
    cb.check_dim(v.len())?;
    if n_layers > cb.n_layers() {
        return Err(CodecError::ShapeError(format!(
            "asked for {n_layers} layers, codebooks have {}",
            cb.n_layers()
        )));
    }
    let mut residual: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let mut codes = Vec::with_capacity(n_layers);
    for table in &cb.layers[..n_layers] {
        let (j, _) = nearest(&residual, table, cb.embed_dim);
        let row = &table[j * cb.embed_dim..(j + 1) * cb.embed_dim];
        for (r, &c) in residual.iter_mut().zip(row) {
            *r -= c as f64;
        }
        codes.push(j as u32);
    }
    Ok((codes, residual))
}

pub fn quantize(v: &[f32], cb: &Codebooks, n_layers: usize) -> Result<Vec<u32>> {
    quantize_with_residual(v, cb, n_layers).map(|(codes, _)| codes)
}

/// Sum of the selected codewords. Any prefix of a code list is valid.
pub fn dequantize(codes: &[u32], cb: &Codebooks) -> Result<Vec<f32>> {
    if codes.len() > cb.n_layers() {
        return Err(CodecError::ShapeError(format!(
            "{} codes for {} layers",
            codes.len(),
            cb.n_layers()
        )));
    }
    let mut acc = vec![0.0f64; cb.embed_dim];
    for (layer, &code) in codes.iter().enumerate() {
        if code as usize >= cb.codebook_size {
            return Err(CodecError::InvalidCode {
                layer,
                code,
                size: cb.codebook_size,
            });
        }
        for (a, &c) in acc.iter_mut().zip(cb.codeword(layer, code as usize)) {
            *a += c as f64;
        }
    }
    Ok(acc.into_iter().map(|a| a as f32).collect())
}

/// Quantizes every frame through all `cfg.n_layers()` layers.
pub fn quantize_sequence(
    e: &EmbeddingSequence,
    cb: &Codebooks,
    cfg: &CodecConfig,
) -> Result<TokenGrid> {
    cb.check_geometry(cfg)?;
    cb.check_dim(e.dim())?;
    let mut codes = Vec::with_capacity(e.n_frames * cfg.n_layers());
    for v in e.iter() {
        codes.extend(quantize(v, cb, cfg.n_layers())?);
    }
    TokenGrid::new(codes, *cfg)
}

/// Reconstructs embeddings from the first `n_layers` layers of a grid.
pub fn dequantize_grid(
    g: &TokenGrid,
    cb: &Codebooks,
    n_layers: usize,
    frontend: crate::frontend::FrontendConfig,
) -> Result<EmbeddingSequence> {
    cb.check_geometry(g.config())?;
    let n_layers = n_layers.min(g.n_layers());
    let mut frames = Vec::with_capacity(g.n_frames() * cb.embed_dim);
    for f in 0..g.n_frames() {
        frames.extend(dequantize(&g.frame(f)[..n_layers], cb)?);
    }
    EmbeddingSequence::new(frames, g.n_frames(), frontend)
}

/// Fits `cfg.n_layers()` codebooks by residual k-means on every frame of
/// every sequence. Deterministic for a given seed.
pub fn fit_codebooks(
    sequences: &[EmbeddingSequence],
    cfg: &CodecConfig,
    seed: u64,
) -> Result<Codebooks> {
    let dim = cfg.embed_dim;
    let mut data = Vec::new();
    for s in sequences {
        cb_dim_check(s.dim(), dim)?;
        data.extend_from_slice(&s.frames);
    }
    fit_codebooks_from_vectors(&data, cfg, seed, &KMeansParams::default())
}

fn cb_dim_check(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(CodecError::ShapeError(format!(
            "embedding dim {got}, config says {want}"
        )));
    }
    Ok(())
}

/// Same as [`fit_codebooks`] over a flat row-major `n x embed_dim` matrix.
pub fn fit_codebooks_from_vectors(
    data: &[f32],
    cfg: &CodecConfig,
    seed: u64,
    params: &KMeansParams,
) -> Result<Codebooks> {
    cfg.validate()?;
    let dim = cfg.embed_dim;
    if data.len() % dim != 0 {
        return Err(CodecError::ShapeError(format!(
            "{} values are not rows of {dim}",
            data.len()
        )));
    }
    let n = data.len() / dim;
    if n < cfg.codebook_size {
        return Err(CodecError::InsufficientData {
            needed: cfg.codebook_size,
            got: n,
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(CodecError::ShapeError(
            "training data contains non-finite values".into(),
        ));
    }
    let mut residuals: Vec<f64> = data.iter().map(|&v| v as f64).collect();
    let mut layers = Vec::with_capacity(cfg.n_layers());
    for layer in 0..cfg.n_layers() {
        let layer_seed = seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let table = kmeans::fit(
            &residuals,
            dim,
            cfg.codebook_size,
            layer > 0,
            layer_seed,
            params,
        );
        for r in residuals.chunks_exact_mut(dim) {
            let (j, _) = nearest(r, &table, dim);
            for (x, &c) in r.iter_mut().zip(&table[j * dim..(j + 1) * dim]) {
                *x -= c as f64;
            }
        }
        log::debug!(
            "layer {layer}: mean squared residual {:.6}",
            residuals.iter().map(|r| r * r).sum::<f64>() / n as f64
        );
        layers.push(table);
    }
    Codebooks::new(cfg.codebook_size, dim, layers)
}

/// Mean squared residual per frame after each layer `1..=n_layers`.
pub fn layer_errors(data: &[f32], cb: &Codebooks) -> Result<Vec<f64>> {
    let dim = cb.embed_dim;
    let mut sums = vec![0.0; cb.n_layers()];
    let n = data.len() / dim;
    for v in data.chunks_exact(dim) {
        let mut residual: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        for (l, table) in cb.layers.iter().enumerate() {
            let (j, _) = nearest(&residual, table, dim);
            for (r, &c) in residual.iter_mut().zip(&table[j * dim..(j + 1) * dim]) {
                *r -= c as f64;
            }
            sums[l] += residual.iter().map(|r| r * r).sum::<f64>();
        }
    }
    Ok(sums.into_iter().map(|s| s / n.max(1) as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cfg(nc: usize, layers: usize, dim: usize) -> CodecConfig {
        CodecConfig::new(nc, layers, 0, dim).unwrap()
    }

    fn gaussian(n: usize, dim: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        (0..n * dim).map(|_| normal.sample(&mut rng)).collect()
    }

    #[test]
    fn singleton_clusters_reproduce_training_set() {
        let dim = 3;
        let data: Vec<f32> = (0..8)
            .flat_map(|i| [i as f32, (i * i) as f32 * 0.5, -(i as f32)])
            .collect();
        let cb = fit_codebooks_from_vectors(&data, &cfg(8, 1, dim), 11, &KMeansParams::default())
            .unwrap();
        let mut got: Vec<Vec<f32>> = cb.layers[0].chunks(dim).map(|c| c.to_vec()).collect();
        let mut want: Vec<Vec<f32>> = data.chunks(dim).map(|c| c.to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
        for v in data.chunks(dim) {
            let (_, r) = quantize_with_residual(v, &cb, 1).unwrap();
            assert!(r.iter().all(|&x| x == 0.0));
        }
    }

    /// Exhaustive 2-means: tries every split of a small sample.
    fn brute_force_two_means(points: &[[f64; 2]]) -> [[f64; 2]; 2] {
        let n = points.len();
        let mut best = (f64::INFINITY, [[0.0; 2]; 2]);
        for mask in 1..(1u32 << n) - 1 {
            let mut sums = [[0.0; 2]; 2];
            let mut counts = [0.0; 2];
            for (i, p) in points.iter().enumerate() {
                let c = ((mask >> i) & 1) as usize;
                sums[c][0] += p[0];
                sums[c][1] += p[1];
                counts[c] += 1.0;
            }
            let means = [
                [sums[0][0] / counts[0], sums[0][1] / counts[0]],
                [sums[1][0] / counts[1], sums[1][1] / counts[1]],
            ];
            let cost: f64 = points
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let m = means[((mask >> i) & 1) as usize];
                    (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)
                })
                .sum();
            if cost < best.0 {
                best = (cost, means);
            }
        }
        best.1
    }

    #[test]
    fn two_gaussian_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0f64, 0.3).unwrap();
        let centers = [[-2.0, 0.0], [2.0, 1.0]];
        let separation = ((4.0f64).powi(2) + 1.0).sqrt();
        let points: Vec<[f64; 2]> = (0..16)
            .map(|i| {
                let c = centers[i % 2];
                [c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]
            })
            .collect();
        let data: Vec<f32> = points
            .iter()
            .flat_map(|p| [p[0] as f32, p[1] as f32])
            .collect();
        let cb =
            fit_codebooks_from_vectors(&data, &cfg(2, 1, 2), 3, &KMeansParams::default()).unwrap();
        let oracle = brute_force_two_means(&points);
        for m in oracle {
            let closest = cb.layers[0]
                .chunks(2)
                .map(|c| ((c[0] as f64 - m[0]).powi(2) + (c[1] as f64 - m[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(
                closest < 1e-5,
                "centroid off the brute-force optimum by {closest}"
            );
        }
        for c in centers {
            let closest = cb.layers[0]
                .chunks(2)
                .map(|w| ((w[0] as f64 - c[0]).powi(2) + (w[1] as f64 - c[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(closest < 0.1 * separation);
        }
    }

    #[test]
    fn fitting_is_deterministic() {
        let data = gaussian(300, 4, 1);
        let c = cfg(16, 3, 4);
        let a = fit_codebooks_from_vectors(&data, &c, 42, &KMeansParams::default()).unwrap();
        let b = fit_codebooks_from_vectors(&data, &c, 42, &KMeansParams::default()).unwrap();
        assert_eq!(a, b);
        let other = fit_codebooks_from_vectors(&data, &c, 43, &KMeansParams::default()).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn deeper_layers_hold_the_zero_codeword() {
        let data = gaussian(200, 4, 2);
        let cb =
            fit_codebooks_from_vectors(&data, &cfg(8, 3, 4), 1, &KMeansParams::default()).unwrap();
        for layer in 1..3 {
            assert!(cb.codeword(layer, 0).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn too_few_vectors() {
        let data = gaussian(7, 2, 0);
        let err = fit_codebooks_from_vectors(&data, &cfg(8, 1, 2), 0, &KMeansParams::default())
            .unwrap_err();
        assert!(matches!(
            err,
            CodecError::InsufficientData { needed: 8, got: 7 }
        ));
    }

    fn toy_codebooks() -> Codebooks {
        Codebooks::new(
            2,
            2,
            vec![vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn two_layer_example() {
        let cb = toy_codebooks();
        let (codes, residual) = quantize_with_residual(&[1.0, 1.0], &cb, 2).unwrap();
        assert_eq!(codes, vec![1, 1]);
        assert_eq!(residual, vec![0.0, 0.0]);
        assert_eq!(dequantize(&codes, &cb).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn exact_codeword_then_zero() {
        let dim = 2;
        let l0 = vec![5.0, 5.0, 1.0, 2.0, -3.0, 0.5];
        let deeper = vec![1.0, 1.0, 0.0, 0.0, -1.0, 0.0];
        let cb = Codebooks::new(3, dim, vec![l0, deeper.clone(), deeper]).unwrap();
        let (codes, residual) = quantize_with_residual(&[1.0, 2.0], &cb, 3).unwrap();
        assert_eq!(codes, vec![1, 1, 1]);
        assert!(residual.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn ties_pick_lowest_index() {
        let mut table = vec![10.0f32; 8 * 2];
        table[3 * 2..3 * 2 + 2].copy_from_slice(&[1.0, 0.0]);
        table[7 * 2..7 * 2 + 2].copy_from_slice(&[-1.0, 0.0]);
        let cb = Codebooks::new(8, 2, vec![table]).unwrap();
        assert_eq!(quantize(&[0.0, 0.0], &cb, 1).unwrap(), vec![3]);
    }

    #[test]
    fn dequantize_edge_cases() {
        let cb = toy_codebooks();
        assert_eq!(dequantize(&[], &cb).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            dequantize(&[0, 2], &cb),
            Err(CodecError::InvalidCode {
                layer: 1,
                code: 2,
                ..
            })
        ));
        assert!(matches!(
            quantize(&[0.0; 3], &cb, 1),
            Err(CodecError::ShapeError(_))
        ));
    }

    #[test]
    fn grid_accessors_and_csv() {
        let c = CodecConfig::new(16, 1, 1, 4).unwrap();
        let mut g = TokenGrid::new(vec![7, 3, 1, 2], c).unwrap();
        assert_eq!(g.n_frames(), 2);
        assert_eq!(g.get(1, 0), 1);
        g.set(1, 1, 9).unwrap();
        assert!(g.set(0, 0, 16).is_err());
        assert_eq!(g.to_csv(), "frame,layer1,layer2\n0,7,3\n1,1,9\n");
        assert_eq!(g.select_frames(&[false, true]).unwrap().codes(), &[1, 9]);
        assert!(TokenGrid::new(vec![1, 2, 3], c).is_err());
        assert!(TokenGrid::new(vec![1, 16], c).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn refinement_and_prefixes(seed in 0u64..10_000) {
            let dim = 3;
            let data = gaussian(64, dim, 77);
            let cb = fit_codebooks_from_vectors(&data, &cfg(8, 4, dim), 9, &KMeansParams::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-4.0f32..4.0)).collect();
            let full = quantize(&v, &cb, 4).unwrap();
            let mut last = f64::INFINITY;
            for l in 1..=4 {
                let (codes, residual) = quantize_with_residual(&v, &cb, l).unwrap();
                prop_assert_eq!(&codes[..], &full[..l]);
                prop_assert!(codes.iter().all(|&c| c < 8));
                let err = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
                prop_assert!(err <= last);
                last = err;
            }
        }
    }
}
