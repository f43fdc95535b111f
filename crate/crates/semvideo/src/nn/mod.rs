//! Minimal neural-network toolkit with hand-written backward passes.
//!
//! Everything computes in f64 so analytic gradients can be verified against
//! central finite differences down to tight tolerances. Layers follow one
//! convention: `forward` returns the output plus a cache of whatever the
//! backward pass needs; `backward` consumes the cache and an upstream
//! gradient, accumulates parameter gradients into a same-shaped accumulator
//! struct, and returns the input gradient.
//!
//! Parameters are exposed through [`Parameterized`], which walks every tensor
//! in a fixed order. Flattening through that trait feeds the optimizer, the
//! checkpoint writer, and the finite-difference checker, so all three see the
//! exact same parameter vector.

mod attention;
mod conv;
mod dense;
mod optim;

pub use attention::{AttentionCache, MultiHeadAttention};
pub use conv::{Conv2d, Conv2dCache, Upsample2d};
pub use dense::{LayerNorm, LayerNormCache, Linear, Mlp, MlpCache};
pub use optim::{AdamW, LrSchedule};

use ndarray::{Array1, Array2};

/// Walk every parameter tensor as a named flat slice, in a fixed order.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));
}

/// Total number of scalar parameters.
pub fn param_count(p: &impl Parameterized) -> usize {
    let mut n = 0;
    p.visit(&mut |_, s| n += s.len());
    n
}

/// Concatenate all parameters into one vector (visit order).
pub fn flatten_params(p: &impl Parameterized) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit(&mut |_, s| out.extend_from_slice(s));
    out
}

/// Scatter a flat vector back into the parameter tensors (visit order).
/// Panics if the length does not match; callers validate sizes up front.
pub fn assign_params(p: &mut impl Parameterized, flat: &[f64]) {
    let mut off = 0;
    p.visit_mut(&mut |_, s| {
        s.copy_from_slice(&flat[off..off + s.len()]);
        off += s.len();
    });
    assert_eq!(off, flat.len(), "parameter count mismatch");
}

/// Named (name, data) pairs, used by the checkpoint format.
pub fn named_params(p: &impl Parameterized) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    p.visit(&mut |name, s| out.push((name.to_string(), s.to_vec())));
    out
}

/// Exact GELU: `0.5 x (1 + erf(x / sqrt(2)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// Derivative of exact GELU.
pub fn gelu_grad(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2)) + x * phi
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backward through row-wise softmax: given `a = softmax(x)` and `da`,
/// returns `dx` where `dx_i = a_i (da_i - sum_j a_j da_j)` per row.
pub fn softmax_rows_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(a.raw_dim());
    for ((arow, darow), mut dxrow) in a
        .rows()
        .into_iter()
        .zip(da.rows())
        .zip(dx.rows_mut())
    {
        let dot: f64 = arow.iter().zip(darow.iter()).map(|(&a, &d)| a * d).sum();
        for ((&a, &d), out) in arow.iter().zip(darow.iter()).zip(dxrow.iter_mut()) {
            *out = a * (d - dot);
        }
    }
    dx
}

/// Softmax over a 1-D slice, in place.
pub fn softmax_inplace(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Central finite difference of `f` at `x`, restricted to `indices`.
///
/// `x` is perturbed in place and restored, so `f` can capture the same
/// buffer the caller mutates between evaluations.
pub fn central_difference_at(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &mut [f64],
    indices: &[usize],
    step: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(x);
        x[i] = orig - step;
        let down = f(x);
        x[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    out
}

/// Central finite difference of `f` over every coordinate of `x`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &mut [f64], step: f64) -> Vec<f64> {
    let idx: Vec<usize> = (0..x.len()).collect();
    central_difference_at(f, x, &idx, step)
}

/// Relative error between an analytic and a numeric gradient entry:
/// `|a - n| / max(|a|, |n|, floor)` with a small floor so near-zero
/// gradients compare by absolute error.
pub fn gradient_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error between paired gradient entries.
pub fn max_gradient_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| gradient_rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Mean-squared-error loss over all entries plus its input gradient.
pub fn mse_and_grad(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let diff = pred - target;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff.mapv(|d| 2.0 * d / n))
}

/// L2-normalize each row; rows with norm below `eps` are left as zeros.
pub fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            row.mapv_inplace(|v| v / norm);
        } else {
            row.fill(0.0);
        }
    }
    out
}

/// Cosine similarity between two flat slices; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Sinusoidal position/timestep embedding of width `dim` (even), the usual
/// interleaved sin/cos at geometric frequencies.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Array1<f64> {
    assert!(dim % 2 == 0, "embedding width must be even");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(i as f64) * (10000.0f64).ln() / half.max(1) as f64).exp();
        out[2 * i] = (position * freq).sin();
        out[2 * i + 1] = (position * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_matches_finite_difference() {
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - num).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn gelu_known_values() {
        assert_eq!(gelu(0.0), 0.0);
        // gelu(1) = 0.5 * (1 + erf(1/sqrt 2)) = Phi(1) = 0.8413447460685429
        // (tolerance reflects the erf implementation's accuracy)
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-9);
        assert!((gelu(-1.0) - (-1.0 + 0.8413447460685429)).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_checks() {
        let x = array![[0.1, -0.4, 2.0], [3.0, 3.0, 3.0]];
        let a = softmax_rows(&x);
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((a[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);

        // check softmax backward against finite differences through a fixed
        // linear functional of the softmax output
        let weights = array![[0.3, -1.0, 0.7], [0.2, 0.5, -0.9]];
        let mut flat: Vec<f64> = x.iter().cloned().collect();
        let mut f = |p: &[f64]| {
            let xm = Array2::from_shape_vec((2, 3), p.to_vec()).unwrap();
            (softmax_rows(&xm) * &weights).sum()
        };
        let numeric = central_difference(&mut f, &mut flat, 1e-6);
        let analytic = softmax_rows_backward(&a, &weights);
        let analytic: Vec<f64> = analytic.iter().cloned().collect();
        assert!(max_gradient_rel_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn l2_normalize_handles_zero_rows() {
        let x = array![[3.0, 4.0], [0.0, 0.0]];
        let n = l2_normalize_rows(&x);
        assert!((n[[0, 0]] - 0.6).abs() < 1e-12);
        assert!((n[[0, 1]] - 0.8).abs() < 1e-12);
        assert_eq!(n[[1, 0]], 0.0);
        assert_eq!(n[[1, 1]], 0.0);
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[-2.0, 0.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn sinusoidal_embedding_layout() {
        let e = sinusoidal_embedding(0.0, 8);
        // position 0: sin terms 0, cos terms 1
        for i in 0..4 {
            assert_eq!(e[2 * i], 0.0);
            assert_eq!(e[2 * i + 1], 1.0);
        }
        let e = sinusoidal_embedding(1.0, 4);
        assert!((e[0] - 1.0f64.sin()).abs() < 1e-12);
        assert!((e[1] - 1.0f64.cos()).abs() < 1e-12);
    }
}
