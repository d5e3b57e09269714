//! Linear, layer-norm, and GELU building blocks with explicit backward
//! passes. Each forward returns whatever the matching backward needs.

use super::tensor::{matmul_dw, matmul_dx, matmul_xwt, Param};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Param,
    /// `(out,)`
    pub bias: Param,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::normal(&[out_dim, in_dim], std, rng),
            bias: Param::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape[0]
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.out_dim()];
        matmul_xwt(
            x,
            &self.weight.value.data,
            Some(&self.bias.value.data),
            rows,
            self.in_dim(),
            self.out_dim(),
            &mut y,
        );
        y
    }

    /// Accumulates weight/bias gradients and returns `dx`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], rows: usize) -> Vec<f64> {
        let (in_dim, out_dim) = (self.in_dim(), self.out_dim());
        let mut dx = vec![0.0; rows * in_dim];
        matmul_dx(dy, &self.weight.value.data, rows, in_dim, out_dim, &mut dx);
        matmul_dw(
            dy,
            x,
            rows,
            in_dim,
            out_dim,
            &mut self.weight.grad.data,
            &mut self.bias.grad.data,
        );
        dx
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// Normalized input before the affine map, per row.
    pub xhat: Vec<f64>,
    /// Reciprocal standard deviation per row.
    pub rstd: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::constant(&[dim], 1.0),
            beta: Param::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> (Vec<f64>, LayerNormCache) {
        let d = self.gamma.numel();
        let mut y = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let gamma = &self.gamma.value.data;
        let beta = &self.beta.value.data;
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (xr[i] - mean) * rs;
                xhat[r * d + i] = h;
                y[r * d + i] = h * gamma[i] + beta[i];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &[f64], rows: usize) -> Vec<f64> {
        let d = self.gamma.numel();
        let gamma = &self.gamma.value.data;
        let mut dx = vec![0.0; rows * d];
        for r in 0..rows {
            let dyr = &dy[r * d..(r + 1) * d];
            let xhr = &cache.xhat[r * d..(r + 1) * d];
            let mut sum_dg = 0.0;
            let mut sum_dgx = 0.0;
            for i in 0..d {
                let g = dyr[i] * gamma[i];
                sum_dg += g;
                sum_dgx += g * xhr[i];
                self.gamma.grad.data[i] += dyr[i] * xhr[i];
                self.beta.grad.data[i] += dyr[i];
            }
            let inv_d = 1.0 / d as f64;
            for i in 0..d {
                let g = dyr[i] * gamma[i];
                dx[r * d + i] =
                    cache.rstd[r] * (g - sum_dg * inv_d - xhr[i] * sum_dgx * inv_d);
            }
        }
        dx
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Numerically stable softmax over `row`, in place.
pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Backward through a softmax row: `dlogit = p * (dprob - sum(dprob * p))`.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64], dlogits: &mut [f64]) {
    let dot: f64 = probs.iter().zip(dprobs).map(|(p, d)| p * d).sum();
    for i in 0..probs.len() {
        dlogits[i] = probs[i] * (dprobs[i] - dot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
        (f(x + eps) - f(x - eps)) / (2.0 * eps)
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 1.9] {
            let fd = central_diff(gelu, x, 1e-6);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn layernorm_normalizes_rows() {
        let ln = LayerNorm::new(8);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..16).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
        let (y, _) = ln.forward(&x, 2);
        for r in 0..2 {
            let row = &y[r * 8..(r + 1) * 8];
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn linear_backward_matches_finite_difference() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut lin = Linear::new(3, 2, 0.5, &mut rng);
        let x = vec![0.3, -0.2, 0.9, 0.1, 0.4, -0.5];
        // Loss = sum of outputs.
        let dy = vec![1.0; 4];
        let dx = lin.backward(&x, &dy, 2);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (lin.forward(&xp, 2).iter().sum::<f64>()
                - lin.forward(&xm, 2).iter().sum::<f64>())
                / (2.0 * eps);
            assert!((dx[i] - fd).abs() < 1e-8);
        }
        // Weight grads.
        for wi in 0..lin.weight.numel() {
            let orig = lin.weight.value.data[wi];
            lin.weight.value.data[wi] = orig + eps;
            let up: f64 = lin.forward(&x, 2).iter().sum();
            lin.weight.value.data[wi] = orig - eps;
            let down: f64 = lin.forward(&x, 2).iter().sum();
            lin.weight.value.data[wi] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!((lin.weight.grad.data[wi] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn layernorm_backward_matches_finite_difference() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut ln = LayerNorm::new(5);
        // Non-trivial gamma so the affine path is exercised.
        for (i, g) in ln.gamma.value.data.iter_mut().enumerate() {
            *g = 1.0 + 0.1 * i as f64;
        }
        let x: Vec<f64> = (0..10).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        // Loss = weighted sum of outputs to give asymmetric gradients.
        let wsum = |y: &[f64]| -> f64 { y.iter().enumerate().map(|(i, v)| v * (i as f64 + 1.0)).sum() };
        let (y0, cache) = ln.forward(&x, 2);
        let dy: Vec<f64> = (0..y0.len()).map(|i| i as f64 + 1.0).collect();
        let dx = ln.backward(&cache, &dy, 2);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (wsum(&ln.forward(&xp, 2).0) - wsum(&ln.forward(&xm, 2).0)) / (2.0 * eps);
            assert!((dx[i] - fd).abs() < 1e-6, "dx[{i}] = {} vs fd {fd}", dx[i]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![1.0, 2.0, 3.0, 4.0];
        softmax_inplace(&mut row);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}
