use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Lloyd iteration limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Stop once the centroid shift, relative to the centroid norm, drops below this.
    pub rel_shift_tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rel_shift_tol: 1e-4,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(data: &[f64], centroids: &[f64], dim: usize) -> Vec<(usize, f64)> {
    data.par_chunks(dim)
        .map(|p| {
            let mut best = (0usize, f64::INFINITY);
            for (j, c) in centroids.chunks_exact(dim).enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// k-means++ seeding followed by Lloyd iterations. With `pin_zero`, centroid
/// 0 is the zero vector, acts as the first seed and never moves.
pub(super) fn fit(
    data: &[f64],
    dim: usize,
    k: usize,
    pin_zero: bool,
    seed: u64,
    params: &KMeansParams,
) -> Vec<f32> {
    let n = data.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |i: usize| &data[i * dim..(i + 1) * dim];

    let mut centroids = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; n];
    if pin_zero {
        centroids.resize(dim, 0.0);
    } else {
        let first = rng.random_range(0..n);
        chosen[first] = true;
        centroids.extend_from_slice(point(first));
    }
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(point(i), &centroids[..dim]))
        .collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave the target just past the last positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // Fewer distinct points than clusters: duplicate the lowest unused index.
            chosen.iter().position(|&c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        let start = centroids.len();
        centroids.extend_from_slice(point(pick));
        let c = centroids[start..].to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &c));
        }
    }

    let first_free = usize::from(pin_zero);
    for _ in 0..params.max_iters {
        let assignment = assign(data, &centroids, dim);
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(j, _)) in assignment.iter().enumerate() {
            counts[j] += 1;
            for (s, &x) in sums[j * dim..(j + 1) * dim].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        // Empty clusters take the points currently worst served, farthest first.
        let mut far: Vec<usize> = (0..n).collect();
        far.sort_by(|&a, &b| assignment[b].1.total_cmp(&assignment[a].1).then(a.cmp(&b)));
        let mut far = far.into_iter();

        let mut shift = 0.0;
        let mut norm = 0.0;
        for j in first_free..k {
            let old = &centroids[j * dim..(j + 1) * dim];
            let new: Vec<f64> = if counts[j] > 0 {
                sums[j * dim..(j + 1) * dim]
                    .iter()
                    .map(|s| s / counts[j] as f64)
                    .collect()
            } else {
                match far.next() {
                    Some(i) => point(i).to_vec(),
                    None => old.to_vec(),
                }
            };
            shift += sq_dist(old, &new);
            norm += old.iter().map(|x| x * x).sum::<f64>();
            centroids[j * dim..(j + 1) * dim].copy_from_slice(&new);
        }
        if shift.sqrt() <= params.rel_shift_tol * norm.sqrt().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    centroids.into_iter().map(|c| c as f32).collect()
}
