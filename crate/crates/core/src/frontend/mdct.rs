use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

/// Orthonormal sine-window MDCT with `n` coefficients over `2n` samples.
///
/// Stored as a dense `2n x n` table of `window[i] * basis[i][k]`; the
/// transform is a plain matrix product evaluated in a fixed order.
#[derive(Debug)]
pub struct Mdct {
    n: usize,
    table: Vec<f64>,
}

impl Mdct {
    pub fn new(n: usize) -> Self {
        assert!(n > 0);
        let nf = n as f64;
        let scale = (2.0 / nf).sqrt();
        let mut table = vec![0.0; 2 * n * n];
        for i in 0..2 * n {
            let w = (PI * (i as f64 + 0.5) / (2.0 * nf)).sin();
            for k in 0..n {
                let c = (PI / nf * (i as f64 + 0.5 + nf / 2.0) * (k as f64 + 0.5)).cos();
                table[i * n + k] = scale * w * c;
            }
        }
        Self { n, table }
    }

    /// Shared instance per size; building the table is O(n^2).
    pub fn cached(n: usize) -> Arc<Mdct> {
        static CACHE: OnceLock<Mutex<Vec<Arc<Mdct>>>> = OnceLock::new();
        let mut cache = CACHE.get_or_init(Default::default).lock().unwrap();
        if let Some(m) = cache.iter().find(|m| m.n == n) {
            return m.clone();
        }
        let m = Arc::new(Mdct::new(n));
        cache.push(m.clone());
        m
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `block` holds `2n` samples, `out` receives `n` coefficients.
    pub fn forward(&self, block: &[f64], out: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(block.len(), 2 * n);
        out.fill(0.0);
        for (i, &x) in block.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.table[i * n..(i + 1) * n];
            for (o, &t) in out.iter_mut().zip(row) {
                *o += x * t;
            }
        }
    }

    /// Windowed inverse: `n` coefficients to `2n` samples ready for overlap-add.
    pub fn inverse(&self, coeffs: &[f64], out: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(coeffs.len(), n);
        for (i, o) in out.iter_mut().enumerate().take(2 * n) {
            let row = &self.table[i * n..(i + 1) * n];
            *o = row.iter().zip(coeffs).map(|(t, c)| t * c).sum();
        }
    }
}
