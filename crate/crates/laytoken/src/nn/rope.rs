//! Rotary positional encoding over explicit position ids.
//!
//! Coordinate pairs `(2k, 2k+1)` of each head vector are rotated by
//! `position_id * base^(-2k / head_dim)`. Position ids are arbitrary
//! non-negative integers: the shared-first scheme deliberately reuses ids,
//! and two tokens with the same id receive the same rotation, so their
//! attention logit equals the unrotated dot product.

use crate::error::{Error, Result};

/// Rotation angles for one position id.
fn angles(pos: usize, head_dim: usize, base: f64, out: &mut [f64]) {
    let half = head_dim / 2;
    for k in 0..half {
        let inv_freq = base.powf(-2.0 * k as f64 / head_dim as f64);
        out[k] = pos as f64 * inv_freq;
    }
}

/// Rotate `vecs` (`seq_len * n_heads * head_dim`, row-major) in place, one
/// position id per sequence slot.
pub fn rope_apply(
    vecs: &mut [f64],
    positions: &[usize],
    n_heads: usize,
    head_dim: usize,
    base: f64,
) -> Result<()> {
    if head_dim % 2 != 0 {
        return Err(Error::Config(format!(
            "rotary encoding needs an even head dimension, got {head_dim}"
        )));
    }
    let seq_len = positions.len();
    debug_assert_eq!(vecs.len(), seq_len * n_heads * head_dim);
    let half = head_dim / 2;
    let mut theta = vec![0.0; half];
    for (s, &pos) in positions.iter().enumerate() {
        angles(pos, head_dim, base, &mut theta);
        for h in 0..n_heads {
            let off = (s * n_heads + h) * head_dim;
            for k in 0..half {
                let (sin, cos) = theta[k].sin_cos();
                let a = vecs[off + 2 * k];
                let b = vecs[off + 2 * k + 1];
                vecs[off + 2 * k] = a * cos - b * sin;
                vecs[off + 2 * k + 1] = a * sin + b * cos;
            }
        }
    }
    Ok(())
}

/// Backward of [`rope_apply`]: the rotation is orthogonal, so gradients are
/// rotated by the negated angles.
pub fn rope_backward(
    grads: &mut [f64],
    positions: &[usize],
    n_heads: usize,
    head_dim: usize,
    base: f64,
) {
    let half = head_dim / 2;
    let mut theta = vec![0.0; half];
    for (s, &pos) in positions.iter().enumerate() {
        angles(pos, head_dim, base, &mut theta);
        for h in 0..n_heads {
            let off = (s * n_heads + h) * head_dim;
            for k in 0..half {
                let (sin, cos) = theta[k].sin_cos();
                let a = grads[off + 2 * k];
                let b = grads[off + 2 * k + 1];
                grads[off + 2 * k] = a * cos + b * sin;
                grads[off + 2 * k + 1] = -a * sin + b * cos;
            }
        }
    }
}

/// Convenience wrapper returning a rotated copy of a single head vector.
pub fn rope_rotate(vec: &[f64], position: usize, base: f64) -> Result<Vec<f64>> {
    let mut out = vec.to_vec();
    rope_apply(&mut out, &[position], 1, vec.len(), base)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn random_vec(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn position_zero_is_identity() {
        let v = vec![0.3, -0.7, 1.1, 0.2];
        let rotated = rope_rotate(&v, 0, 10000.0).unwrap();
        assert_eq!(rotated, v);
    }

    #[test]
    fn odd_head_dim_is_rejected() {
        let mut v = vec![1.0, 2.0, 3.0];
        assert!(matches!(
            rope_apply(&mut v, &[1], 1, 3, 10000.0),
            Err(Error::Config(_))
        ));
    }

    /// The attention logit depends only on the relative position:
    /// <R(m)q, R(n)k> = <R(m+c)q, R(n+c)k>.
    #[test]
    fn dot_products_are_shift_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..100 {
            let q = random_vec(&mut rng, 16);
            let k = random_vec(&mut rng, 16);
            let m = rng.random_range(0..64usize);
            let n = rng.random_range(0..64usize);
            let c = rng.random_range(0..512usize);
            let base = dot(
                &rope_rotate(&q, m, 10000.0).unwrap(),
                &rope_rotate(&k, n, 10000.0).unwrap(),
            );
            let shifted = dot(
                &rope_rotate(&q, m + c, 10000.0).unwrap(),
                &rope_rotate(&k, n + c, 10000.0).unwrap(),
            );
            assert!((base - shifted).abs() < 1e-9, "{base} vs {shifted}");
        }
    }

    /// Tokens that share a position id share the exact rotation, which is
    /// what lets a layout token reuse its segment's first text id.
    #[test]
    fn equal_ids_mean_equal_rotation() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        for _ in 0..100 {
            let q = random_vec(&mut rng, 8);
            let k = random_vec(&mut rng, 8);
            let p = rng.random_range(0..2048usize);
            let rq = rope_rotate(&q, p, 10000.0).unwrap();
            let rk = rope_rotate(&k, p, 10000.0).unwrap();
            assert!((dot(&rq, &rk) - dot(&q, &k)).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_inverts_forward() {
        let mut rng = ChaCha12Rng::seed_from_u64(44);
        let original = random_vec(&mut rng, 2 * 2 * 8);
        let mut v = original.clone();
        let positions = [5, 17];
        rope_apply(&mut v, &positions, 2, 8, 10000.0).unwrap();
        rope_backward(&mut v, &positions, 2, 8, 10000.0);
        for (a, b) in v.iter().zip(&original) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
