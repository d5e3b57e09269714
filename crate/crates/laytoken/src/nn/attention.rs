//! Causal multi-head self-attention with rotary positions.
//!
//! Causality is by sequence index: token `i` attends to slots `0..=i`
//! regardless of position ids, so shared or reused ids never widen the
//! visible context.

use super::layers::{softmax_backward, softmax_inplace, Linear};
use super::rope::{rope_apply, rope_backward};
use crate::error::Result;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub rope_base: f64,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    /// Post-rotation queries and keys, values; all `(seq, d)`.
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `(head, query, key)` attention probabilities, lower-triangular.
    att: Vec<f64>,
    /// Mixed values before the output projection, `(seq, d)`.
    ctx: Vec<f64>,
    positions: Vec<usize>,
}

impl MultiHeadAttention {
    pub fn new(d_model: usize, n_heads: usize, rope_base: f64, std: f64, rng: &mut impl Rng) -> Self {
        MultiHeadAttention {
            wq: Linear::new(d_model, d_model, std, rng),
            wk: Linear::new(d_model, d_model, std, rng),
            wv: Linear::new(d_model, d_model, std, rng),
            wo: Linear::new(d_model, d_model, std, rng),
            n_heads,
            rope_base,
        }
    }

    fn head_dim(&self) -> usize {
        self.wq.out_dim() / self.n_heads
    }

    pub fn forward(&self, x: &[f64], positions: &[usize]) -> Result<(Vec<f64>, AttnCache)> {
        let seq = positions.len();
        let d = self.wq.out_dim();
        let (nh, hd) = (self.n_heads, self.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();

        let mut q = self.wq.forward(x, seq);
        let mut k = self.wk.forward(x, seq);
        let v = self.wv.forward(x, seq);
        rope_apply(&mut q, positions, nh, hd, self.rope_base)?;
        rope_apply(&mut k, positions, nh, hd, self.rope_base)?;

        let mut att = vec![0.0; nh * seq * seq];
        let mut ctx = vec![0.0; seq * d];
        for h in 0..nh {
            let hoff = h * hd;
            for i in 0..seq {
                let qi = &q[i * d + hoff..i * d + hoff + hd];
                let row = &mut att[(h * seq + i) * seq..(h * seq + i + 1) * seq];
                for j in 0..=i {
                    let kj = &k[j * d + hoff..j * d + hoff + hd];
                    row[j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_inplace(&mut row[..=i]);
                let ctx_i = &mut ctx[i * d + hoff..i * d + hoff + hd];
                for j in 0..=i {
                    let p = row[j];
                    let vj = &v[j * d + hoff..j * d + hoff + hd];
                    for t in 0..hd {
                        ctx_i[t] += p * vj[t];
                    }
                }
            }
        }
        let y = self.wo.forward(&ctx, seq);
        Ok((
            y,
            AttnCache {
                q,
                k,
                v,
                att,
                ctx,
                positions: positions.to_vec(),
            },
        ))
    }

    /// `x` must be the same input given to `forward`. Returns `dx`.
    pub fn backward(&mut self, x: &[f64], cache: &AttnCache, dy: &[f64]) -> Vec<f64> {
        let seq = cache.positions.len();
        let d = self.wq.out_dim();
        let (nh, hd) = (self.n_heads, self.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();

        let dctx = self.wo.backward(&cache.ctx, dy, seq);

        let mut dq = vec![0.0; seq * d];
        let mut dk = vec![0.0; seq * d];
        let mut dv = vec![0.0; seq * d];
        let mut datt_row = vec![0.0; seq];
        let mut dlog_row = vec![0.0; seq];
        for h in 0..nh {
            let hoff = h * hd;
            for i in 0..seq {
                let row = &cache.att[(h * seq + i) * seq..(h * seq + i + 1) * seq];
                let dctx_i = &dctx[i * d + hoff..i * d + hoff + hd];
                for j in 0..=i {
                    let vj = &cache.v[j * d + hoff..j * d + hoff + hd];
                    datt_row[j] = dctx_i.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let dvj = &mut dv[j * d + hoff..j * d + hoff + hd];
                    let p = row[j];
                    for t in 0..hd {
                        dvj[t] += p * dctx_i[t];
                    }
                }
                softmax_backward(&row[..=i], &datt_row[..=i], &mut dlog_row[..=i]);
                let qi = &cache.q[i * d + hoff..i * d + hoff + hd];
                for j in 0..=i {
                    let g = dlog_row[j] * scale;
                    if g == 0.0 {
                        continue;
                    }
                    let kj = &cache.k[j * d + hoff..j * d + hoff + hd];
                    let dqi = &mut dq[i * d + hoff..i * d + hoff + hd];
                    for t in 0..hd {
                        dqi[t] += g * kj[t];
                    }
                    let dkj = &mut dk[j * d + hoff..j * d + hoff + hd];
                    for t in 0..hd {
                        dkj[t] += g * qi[t];
                    }
                }
            }
        }

        rope_backward(&mut dq, &cache.positions, nh, hd, self.rope_base);
        rope_backward(&mut dk, &cache.positions, nh, hd, self.rope_base);

        let mut dx = self.wq.backward(x, &dq, seq);
        for (a, b) in dx.iter_mut().zip(self.wk.backward(x, &dk, seq)) {
            *a += b;
        }
        for (a, b) in dx.iter_mut().zip(self.wv.backward(x, &dv, seq)) {
            *a += b;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn make_attn(seed: u64) -> MultiHeadAttention {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        MultiHeadAttention::new(8, 2, 10000.0, 0.3, &mut rng)
    }

    #[test]
    fn softmax_rows_cover_only_the_past() {
        let attn = make_attn(1);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..3 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = attn.forward(&x, &[0, 1, 2]).unwrap();
        for h in 0..2 {
            for i in 0..3 {
                let row = &cache.att[(h * 3 + i) * 3..(h * 3 + i + 1) * 3];
                let sum: f64 = row[..=i].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                for &p in &row[i + 1..] {
                    assert_eq!(p, 0.0, "future positions must stay masked");
                }
            }
        }
    }

    /// Causality: perturbing a future token leaves earlier outputs unchanged.
    #[test]
    fn future_tokens_do_not_leak_backward() {
        let attn = make_attn(3);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut x: Vec<f64> = (0..4 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (y1, _) = attn.forward(&x, &[0, 1, 2, 3]).unwrap();
        x[3 * 8 + 2] += 0.5; // token 3
        let (y2, _) = attn.forward(&x, &[0, 1, 2, 3]).unwrap();
        assert_eq!(&y1[..3 * 8], &y2[..3 * 8]);
        assert_ne!(&y1[3 * 8..], &y2[3 * 8..]);
    }

    #[test]
    fn backward_matches_finite_difference() {
        let mut attn = make_attn(5);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..3 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let positions = [0usize, 1, 1];
        // Loss: weighted sum of outputs.
        let w: Vec<f64> = (0..3 * 8).map(|i| ((i % 5) as f64 - 2.0) * 0.3).collect();
        let loss = |attn: &MultiHeadAttention, x: &[f64]| -> f64 {
            let (y, _) = attn.forward(x, &positions).unwrap();
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = attn.forward(&x, &positions).unwrap();
        let dx = attn.backward(&x, &cache, &w);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (loss(&attn, &xp) - loss(&attn, &xm)) / (2.0 * eps);
            assert!(
                (dx[i] - fd).abs() < 1e-7,
                "dx[{i}] = {}, fd = {fd}",
                dx[i]
            );
        }
        // Spot-check a few weight gradients.
        for (pi, idx) in [(0usize, 3usize), (1, 10), (2, 20), (3, 7)] {
            let param_val = |attn: &MultiHeadAttention, pi: usize, idx: usize| match pi {
                0 => attn.wq.weight.value.data[idx],
                1 => attn.wk.weight.value.data[idx],
                2 => attn.wv.weight.value.data[idx],
                _ => attn.wo.weight.value.data[idx],
            };
            let set = |attn: &mut MultiHeadAttention, pi: usize, idx: usize, v: f64| match pi {
                0 => attn.wq.weight.value.data[idx] = v,
                1 => attn.wk.weight.value.data[idx] = v,
                2 => attn.wv.weight.value.data[idx] = v,
                _ => attn.wo.weight.value.data[idx] = v,
            };
            let grad = match pi {
                0 => attn.wq.weight.grad.data[idx],
                1 => attn.wk.weight.grad.data[idx],
                2 => attn.wv.weight.grad.data[idx],
                _ => attn.wo.weight.grad.data[idx],
            };
            let orig = param_val(&attn, pi, idx);
            set(&mut attn, pi, idx, orig + eps);
            let up = loss(&attn, &x);
            set(&mut attn, pi, idx, orig - eps);
            let down = loss(&attn, &x);
            set(&mut attn, pi, idx, orig);
            let fd = (up - down) / (2.0 * eps);
            assert!((grad - fd).abs() < 1e-7, "param {pi}[{idx}]: {grad} vs {fd}");
        }
    }
}
