use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::ops;
use super::{Transformer, TransformerConfig};
use crate::config::CodecConfig;
use crate::error::{CodecError, Result};
use crate::probmodel::{Flattening, Role};
use crate::rvq::TokenGrid;

/// One training window.
#[derive(Debug, Clone)]
pub(crate) struct Example {
    pub inputs: Vec<usize>,
    pub frames: Vec<usize>,
    pub layers: Vec<usize>,
    pub targets: Vec<usize>,
    /// Positions that contribute to the loss.
    pub mask: Vec<bool>,
}

impl Example {
    /// Window of `symbols` covering frames `[start, start + frames)`.
    pub fn window(
        symbols: &[u32],
        flat: &Flattening,
        start: usize,
        frames: usize,
        bos: usize,
    ) -> Self {
        let pf = flat.per_frame();
        let lo = start * pf;
        let hi = ((start + frames) * pf).min(symbols.len());
        let mut ex = Example {
            inputs: Vec::with_capacity(hi - lo),
            frames: Vec::with_capacity(hi - lo),
            layers: Vec::with_capacity(hi - lo),
            targets: Vec::with_capacity(hi - lo),
            mask: Vec::with_capacity(hi - lo),
        };
        for i in lo..hi {
            let (f, l) = flat.position(i);
            ex.inputs.push(if i == lo {
                bos
            } else {
                symbols[i - 1] as usize
            });
            ex.frames.push(f - start);
            ex.layers.push(l);
            ex.targets.push(symbols[i] as usize);
            ex.mask.push(flat.is_target(l));
        }
        ex
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    fn loss_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

struct BlockCache {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    m: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Summed cross-entropy (nats) over masked positions and its gradient.
fn forward_backward(net: &Transformer, ex: &Example) -> (f64, Vec<f64>) {
    let l = net.layout;
    let bl = l.block();
    let d = l.d;
    let t_len = ex.len();
    let hd = l.head_dim();
    let heads = l.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let p = |at: usize, len: usize| &net.params[at..at + len];

    let mut x = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        x.extend(net.embed(ex.inputs[t], ex.frames[t], ex.layers[t]));
    }

    let mut caches = Vec::with_capacity(l.blocks);
    for b in 0..l.blocks {
        let s = l.block_start(b);
        let (a, xhat1, rstd1) = ops::layer_norm(&x, p(s + bl.ln1_g, d), p(s + bl.ln1_b, d), d);
        let qkv = ops::linear(
            &a,
            p(s + bl.w_qkv, 3 * d * d),
            p(s + bl.b_qkv, 3 * d),
            t_len,
            d,
            3 * d,
        );
        let mut probs = vec![0.0; heads * t_len * t_len];
        let mut att = vec![0.0; t_len * d];
        for h in 0..heads {
            for i in 0..t_len {
                let q = &qkv[i * 3 * d + h * hd..i * 3 * d + (h + 1) * hd];
                let mut scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        ops::dot(
                            q,
                            &qkv[j * 3 * d + d + h * hd..j * 3 * d + d + (h + 1) * hd],
                        ) * scale
                    })
                    .collect();
                ops::softmax(&mut scores);
                let out = &mut att[i * d + h * hd..i * d + (h + 1) * hd];
                for (j, &pr) in scores.iter().enumerate() {
                    let v = &qkv[j * 3 * d + 2 * d + h * hd..j * 3 * d + 2 * d + (h + 1) * hd];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += pr * vv;
                    }
                }
                probs[(h * t_len + i) * t_len..(h * t_len + i) * t_len + i + 1]
                    .copy_from_slice(&scores);
            }
        }
        let proj = ops::linear(&att, p(s + bl.w_o, d * d), p(s + bl.b_o, d), t_len, d, d);
        for (xi, pi) in x.iter_mut().zip(&proj) {
            *xi += pi;
        }
        let (m, xhat2, rstd2) = ops::layer_norm(&x, p(s + bl.ln2_g, d), p(s + bl.ln2_b, d), d);
        let u = ops::linear(
            &m,
            p(s + bl.w_fc, 4 * d * d),
            p(s + bl.b_fc, 4 * d),
            t_len,
            d,
            4 * d,
        );
        let g: Vec<f64> = u.iter().map(|&v| ops::gelu(v)).collect();
        let out = ops::linear(
            &g,
            p(s + bl.w_proj, 4 * d * d),
            p(s + bl.b_proj, d),
            t_len,
            4 * d,
            d,
        );
        for (xi, oi) in x.iter_mut().zip(&out) {
            *xi += oi;
        }
        caches.push(BlockCache {
            xhat1,
            rstd1,
            a,
            qkv,
            probs,
            att,
            xhat2,
            rstd2,
            m,
            u,
            g,
        });
    }

    let v = l.vocab;
    let (hf, xhatf, rstdf) = ops::layer_norm(&x, p(l.lnf_g, d), p(l.lnf_b, d), d);
    let emb = p(l.tok, v * d);
    let mut logits = ops::matmul_bt(&hf, emb, t_len, d, v);
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; t_len * v];
    for t in 0..t_len {
        if !ex.mask[t] {
            continue;
        }
        let row = &mut logits[t * v..(t + 1) * v];
        for (o, b) in row.iter_mut().zip(p(l.out_bias, v)) {
            *o += b;
        }
        ops::softmax(row);
        loss -= row[ex.targets[t]].ln();
        let dr = &mut dlogits[t * v..(t + 1) * v];
        dr.copy_from_slice(row);
        dr[ex.targets[t]] -= 1.0;
    }

    let mut grad = vec![0.0; l.total];
    ops::col_sum_acc(&dlogits, &mut grad[l.out_bias..l.out_bias + v], v);
    // Tied projection: logits = hf * E^T.
    ops::matmul_at_acc(&dlogits, &hf, &mut grad[l.tok..l.tok + v * d], t_len, v, d);
    let mut dhf = vec![0.0; t_len * d];
    ops::matmul_acc(&dlogits, emb, &mut dhf, t_len, v, d);
    let mut dx = {
        let (gs, rest) = grad[l.lnf_g..].split_at_mut(d);
        ops::layer_norm_backward(&dhf, &xhatf, &rstdf, p(l.lnf_g, d), gs, &mut rest[..d], d)
    };

    for b in (0..l.blocks).rev() {
        let s = l.block_start(b);
        let c = &caches[b];
        let gb = &mut grad[s..s + l.block_size];

        // MLP branch.
        ops::col_sum_acc(&dx, &mut gb[bl.b_proj..bl.b_proj + d], d);
        ops::matmul_at_acc(
            &c.g,
            &dx,
            &mut gb[bl.w_proj..bl.w_proj + 4 * d * d],
            t_len,
            4 * d,
            d,
        );
        let mut du = ops::matmul_bt(&dx, p(s + bl.w_proj, 4 * d * d), t_len, d, 4 * d);
        for (g, &u) in du.iter_mut().zip(&c.u) {
            *g *= ops::gelu_grad(u);
        }
        ops::col_sum_acc(&du, &mut gb[bl.b_fc..bl.b_fc + 4 * d], 4 * d);
        ops::matmul_at_acc(
            &c.m,
            &du,
            &mut gb[bl.w_fc..bl.w_fc + 4 * d * d],
            t_len,
            d,
            4 * d,
        );
        let dm = ops::matmul_bt(&du, p(s + bl.w_fc, 4 * d * d), t_len, 4 * d, d);
        let dmid = {
            let (lo, hi) = gb.split_at_mut(bl.ln2_b);
            ops::layer_norm_backward(
                &dm,
                &c.xhat2,
                &c.rstd2,
                p(s + bl.ln2_g, d),
                &mut lo[bl.ln2_g..bl.ln2_g + d],
                &mut hi[..d],
                d,
            )
        };
        for (a, b) in dx.iter_mut().zip(&dmid) {
            *a += b;
        }

        // Attention branch.
        ops::col_sum_acc(&dx, &mut gb[bl.b_o..bl.b_o + d], d);
        ops::matmul_at_acc(&c.att, &dx, &mut gb[bl.w_o..bl.w_o + d * d], t_len, d, d);
        let datt = ops::matmul_bt(&dx, p(s + bl.w_o, d * d), t_len, d, d);
        let mut dqkv = vec![0.0; t_len * 3 * d];
        for h in 0..heads {
            for i in 0..t_len {
                let pr = &c.probs[(h * t_len + i) * t_len..(h * t_len + i) * t_len + i + 1];
                let da = &datt[i * d + h * hd..i * d + (h + 1) * hd];
                let dp: Vec<f64> = (0..=i)
                    .map(|j| {
                        ops::dot(
                            da,
                            &c.qkv[j * 3 * d + 2 * d + h * hd..j * 3 * d + 2 * d + (h + 1) * hd],
                        )
                    })
                    .collect();
                let inner: f64 = pr.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    let dv =
                        &mut dqkv[j * 3 * d + 2 * d + h * hd..j * 3 * d + 2 * d + (h + 1) * hd];
                    for (o, &g) in dv.iter_mut().zip(da) {
                        *o += pr[j] * g;
                    }
                    let ds = pr[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for e in 0..hd {
                        let qi = c.qkv[i * 3 * d + h * hd + e];
                        let kj = c.qkv[j * 3 * d + d + h * hd + e];
                        dqkv[i * 3 * d + h * hd + e] += ds * kj;
                        dqkv[j * 3 * d + d + h * hd + e] += ds * qi;
                    }
                }
            }
        }
        ops::col_sum_acc(&dqkv, &mut gb[bl.b_qkv..bl.b_qkv + 3 * d], 3 * d);
        ops::matmul_at_acc(
            &c.a,
            &dqkv,
            &mut gb[bl.w_qkv..bl.w_qkv + 3 * d * d],
            t_len,
            d,
            3 * d,
        );
        let da = ops::matmul_bt(&dqkv, p(s + bl.w_qkv, 3 * d * d), t_len, 3 * d, d);
        let din = {
            let (lo, hi) = gb.split_at_mut(bl.ln1_b);
            ops::layer_norm_backward(
                &da,
                &c.xhat1,
                &c.rstd1,
                p(s + bl.ln1_g, d),
                &mut lo[bl.ln1_g..bl.ln1_g + d],
                &mut hi[..d],
                d,
            )
        };
        for (a, b) in dx.iter_mut().zip(&din) {
            *a += b;
        }
    }

    for t in 0..t_len {
        let row = &dx[t * d..(t + 1) * d];
        for (dst, at) in [
            (l.tok, ex.inputs[t]),
            (l.frame, ex.frames[t]),
            (l.layer, ex.layers[t]),
        ] {
            for (g, &v) in grad[dst + at * d..dst + (at + 1) * d].iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    (loss, grad)
}

/// Mean per-position cross-entropy (nats) over a batch and its gradient.
/// Per-example gradients are computed in parallel and summed in batch order.
pub(crate) fn loss_and_grad(net: &Transformer, batch: &[Example]) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|ex| forward_backward(net, ex))
        .collect();
    let n: usize = batch.iter().map(Example::loss_positions).sum();
    let mut grad = vec![0.0; net.params.len()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let inv = 1.0 / n.max(1) as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (loss * inv, grad)
}

/// Loss curve recorded during training, in bits per predicted symbol.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub points: Vec<(usize, f64)>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss_bits\n");
        for (step, loss) in &self.points {
            s.push_str(&format!("{step},{loss:.6}\n"));
        }
        s
    }
}

struct Corpus {
    streams: Vec<Vec<u32>>,
    frames: Vec<usize>,
    total_frames: usize,
}

fn sample_batch(
    corpus: &Corpus,
    flat: &Flattening,
    max_frames: usize,
    bos: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Example> {
    (0..size)
        .map(|_| {
            // Streams are drawn in proportion to their length.
            let mut pick = rng.random_range(0..corpus.total_frames);
            let mut g = 0;
            while pick >= corpus.frames[g] {
                pick -= corpus.frames[g];
                g += 1;
            }
            let frames = corpus.frames[g];
            let len = frames.min(max_frames);
            let start = rng.random_range(0..=frames - len);
            Example::window(&corpus.streams[g], flat, start, len, bos)
        })
        .collect()
}

pub(crate) fn train(
    grids: &[TokenGrid],
    role: Role,
    cfg: &CodecConfig,
    tcfg: &TransformerConfig,
    seed: u64,
) -> Result<(Transformer, TrainingLog)> {
    cfg.validate()?;
    tcfg.validate()?;
    if role == Role::Fine && cfg.n_fine == 0 {
        return Err(CodecError::InvalidConfig(
            "fine model needs at least one fine layer".into(),
        ));
    }
    let flat = Flattening::new(role, cfg);
    let mut corpus = Corpus {
        streams: Vec::new(),
        frames: Vec::new(),
        total_frames: 0,
    };
    for g in grids {
        if g.config().codebook_size != cfg.codebook_size || g.config().n_coarse != cfg.n_coarse {
            return Err(CodecError::ShapeError(format!(
                "training grid geometry {:?} does not match {cfg:?}",
                g.config()
            )));
        }
        if g.n_frames() > 0 {
            corpus.streams.push(flat.flatten(g));
            corpus.frames.push(g.n_frames());
            corpus.total_frames += g.n_frames();
        }
    }
    if corpus.total_frames == 0 {
        return Err(CodecError::InsufficientData { needed: 1, got: 0 });
    }

    let mut net = Transformer::init(cfg.codebook_size, flat.per_frame(), tcfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.99, 1e-8);
    let mut m1 = vec![0.0; net.params.len()];
    let mut m2 = vec![0.0; net.params.len()];
    let mut log = TrainingLog::default();
    let max_frames = net.layout.max_frames;
    let bos = net.layout.bos();

    for step in 1..=tcfg.steps {
        let batch = sample_batch(&corpus, &flat, max_frames, bos, tcfg.batch_size, &mut rng);
        let (loss, mut grad) = loss_and_grad(&net, &batch);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(CodecError::TrainingDiverged { step });
        }
        if step == 1 || step % tcfg.log_every.max(1) == 0 || step == tcfg.steps {
            log.points.push((step, loss / std::f64::consts::LN_2));
            log::debug!(
                "step {step}: loss {:.4} bits",
                loss / std::f64::consts::LN_2
            );
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if tcfg.grad_clip > 0.0 && norm > tcfg.grad_clip {
            let s = tcfg.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let lr = tcfg.learning_rate * (step as f64 / tcfg.warmup_steps.max(1) as f64).min(1.0);
        let c1 = 1.0 - beta1.powi(step as i32);
        let c2 = 1.0 - beta2.powi(step as i32);
        for i in 0..net.params.len() {
            m1[i] = beta1 * m1[i] + (1.0 - beta1) * grad[i];
            m2[i] = beta2 * m2[i] + (1.0 - beta2) * grad[i] * grad[i];
            net.params[i] -= lr * (m1[i] / c1) / ((m2[i] / c2).sqrt() + eps);
        }
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probmodel::transformer::Transformer;

    fn toy() -> (Transformer, Vec<Example>) {
        let cfg = TransformerConfig {
            n_blocks: 2,
            n_heads: 2,
            width: 8,
            context: 12,
            ..Default::default()
        };
        let mut net = Transformer::init(5, 3, &cfg, 3).unwrap();
        // Move away from the symmetric init so every parameter gets a gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in net.params.iter_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        let flat = Flattening {
            role: Role::Fine,
            n_coarse: 1,
            n_fine: 2,
        };
        let symbols = [1u32, 4, 0, 2, 2, 3, 0, 1, 4, 3, 3, 1];
        let batch = vec![
            Example::window(&symbols, &flat, 0, 4, net.layout.bos()),
            Example::window(&symbols, &flat, 1, 3, net.layout.bos()),
        ];
        (net, batch)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (net, batch) = toy();
        let (_, grad) = loss_and_grad(&net, &batch);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..net.params.len() {
            let mut plus = net.clone();
            plus.params[i] += h;
            let mut minus = net.clone();
            minus.params[i] -= h;
            let fd = (loss_and_grad(&plus, &batch).0 - loss_and_grad(&minus, &batch).0) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            let rel = (fd - grad[i]).abs() / denom;
            worst = worst.max(rel);
            assert!(
                rel < 1e-3,
                "param {i}: analytic {} vs numeric {fd}",
                grad[i]
            );
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn training_forward_matches_incremental_session() {
        let (net, batch) = toy();
        let ex = &batch[0];
        let symbols: Vec<u32> = ex.targets.iter().map(|&t| t as u32).collect();
        let mut session = net.session(3);
        let mut total = 0.0;
        for t in 0..ex.len() {
            if ex.mask[t] {
                let d = session.distribution(&symbols[..t]).unwrap();
                // Undo the probability floor to compare raw softmax values.
                let n = d.len() as f64;
                let p = (d.probs()[ex.targets[t]] - crate::probmodel::PROB_FLOOR)
                    / (1.0 - n * crate::probmodel::PROB_FLOOR);
                total -= p.ln();
            }
        }
        let (loss, _) = forward_backward(&net, ex);
        assert!((loss - total).abs() < 1e-9, "{loss} vs {total}");
    }
}
