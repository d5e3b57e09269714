//! Pre-norm transformer block: `x + Attn(LN(x))` then `x + MLP(LN(x))`,
//! GELU in the MLP.

use super::attention::{AttnCache, MultiHeadAttention};
use super::layers::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear};
use crate::error::Result;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    fn new(d_model: usize, d_ff: usize, std: f64, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::new(d_model, d_ff, std, rng),
            fc2: Linear::new(d_ff, d_model, std, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LayerNormCache,
    /// LN1 output, the attention input.
    a: Vec<f64>,
    attn: AttnCache,
    ln2: LayerNormCache,
    /// LN2 output, the MLP input.
    m: Vec<f64>,
    /// Pre-activation of fc1.
    f1: Vec<f64>,
    /// Post-GELU activations.
    g: Vec<f64>,
}

impl Block {
    pub fn new(
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        rope_base: f64,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Block {
            ln1: LayerNorm::new(d_model),
            attn: MultiHeadAttention::new(d_model, n_heads, rope_base, std, rng),
            ln2: LayerNorm::new(d_model),
            mlp: Mlp::new(d_model, d_ff, std, rng),
        }
    }

    pub fn forward(&self, x: &[f64], positions: &[usize]) -> Result<(Vec<f64>, BlockCache)> {
        let seq = positions.len();
        let (a, ln1_cache) = self.ln1.forward(x, seq);
        let (attn_out, attn_cache) = self.attn.forward(&a, positions)?;
        let mid: Vec<f64> = x.iter().zip(&attn_out).map(|(r, o)| r + o).collect();

        let (m, ln2_cache) = self.ln2.forward(&mid, seq);
        let f1 = self.mlp.fc1.forward(&m, seq);
        let g: Vec<f64> = f1.iter().map(|&v| gelu(v)).collect();
        let f2 = self.mlp.fc2.forward(&g, seq);
        let out: Vec<f64> = mid.iter().zip(&f2).map(|(r, o)| r + o).collect();

        Ok((
            out,
            BlockCache {
                ln1: ln1_cache,
                a,
                attn: attn_cache,
                ln2: ln2_cache,
                m,
                f1,
                g,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &[f64], seq: usize) -> Vec<f64> {
        // MLP branch.
        let dg = self.mlp.fc2.backward(&cache.g, dy, seq);
        let df1: Vec<f64> = dg
            .iter()
            .zip(&cache.f1)
            .map(|(d, &pre)| d * gelu_grad(pre))
            .collect();
        let dm = self.mlp.fc1.backward(&cache.m, &df1, seq);
        let mut dmid = self.ln2.backward(&cache.ln2, &dm, seq);
        // Residual passthrough of the MLP sub-block.
        for (a, b) in dmid.iter_mut().zip(dy) {
            *a += b;
        }

        // Attention branch.
        let da = self.attn.backward(&cache.a, &cache.attn, &dmid);
        let mut dx = self.ln1.backward(&cache.ln1, &da, seq);
        for (a, b) in dx.iter_mut().zip(&dmid) {
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

    #[test]
    fn block_backward_matches_finite_difference() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut block = Block::new(8, 2, 16, 10000.0, 0.3, &mut rng);
        let x: Vec<f64> = (0..3 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let positions = [0usize, 1, 0];
        let w: Vec<f64> = (0..3 * 8).map(|i| ((i % 7) as f64 - 3.0) * 0.2).collect();
        let loss = |b: &Block, x: &[f64]| -> f64 {
            let (y, _) = b.forward(x, &positions).unwrap();
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = block.forward(&x, &positions).unwrap();
        let dx = block.backward(&cache, &w, 3);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (loss(&block, &xp) - loss(&block, &xm)) / (2.0 * eps);
            assert!((dx[i] - fd).abs() < 1e-6, "dx[{i}] = {} vs {fd}", dx[i]);
        }
    }
}
