//! Minimal dense tensor and parameter types, 64-bit throughout.
//!
//! Training precision is f64 so the finite-difference gradient checks can
//! hold tight tolerances; checkpoints downcast to f32 on disk.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }
}

/// A learnable tensor with an additively accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
        }
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let mut p = Param::zeros(shape);
        let dist = Normal::new(0.0, std).expect("std must be finite");
        for v in &mut p.value.data {
            *v = dist.sample(rng);
        }
        p
    }

    pub fn constant(shape: &[usize], v: f64) -> Self {
        let mut p = Param::zeros(shape);
        p.value.fill(v);
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// `y[r,o] = sum_i x[r,i] * w[o,i] (+ b[o])` — linear layer forward with the
/// weight stored `(out, in)` so both operands stream contiguously.
pub fn matmul_xwt(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    y: &mut [f64],
) {
    debug_assert_eq!(x.len(), rows * in_dim);
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(y.len(), rows * out_dim);
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let yr = &mut y[r * out_dim..(r + 1) * out_dim];
        for o in 0..out_dim {
            let wo = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b.map_or(0.0, |b| b[o]);
            for i in 0..in_dim {
                acc += xr[i] * wo[i];
            }
            yr[o] = acc;
        }
    }
}

/// `dx[r,i] += sum_o dy[r,o] * w[o,i]`.
pub fn matmul_dx(
    dy: &[f64],
    w: &[f64],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    dx: &mut [f64],
) {
    for r in 0..rows {
        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            let wo = &w[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dxr[i] += g * wo[i];
            }
        }
    }
}

/// `dw[o,i] += sum_r dy[r,o] * x[r,i]`, `db[o] += sum_r dy[r,o]`.
pub fn matmul_dw(
    dy: &[f64],
    x: &[f64],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    for r in 0..rows {
        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let g = dyr[o];
            db[o] += g;
            if g == 0.0 {
                continue;
            }
            let dwo = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dwo[i] += g * xr[i];
            }
        }
    }
}
