//! Linear, layer-norm, and MLP building blocks.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{gelu, gelu_grad, Parameterized};

/// Fully connected layer, `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// Uniform init in `±1/sqrt(d_in)` for weights and bias.
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let w = Array2::from_shape_fn((d_in, d_out), |_| rng.gen_range(-bound..bound));
        let b = Array1::from_shape_fn(d_out, |_| rng.gen_range(-bound..bound));
        Linear { w, b }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Array2::zeros((d_in, d_out)),
            b: Array1::zeros(d_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Parameterized for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w", self.w.as_slice().expect("standard layout"));
        f("b", self.b.as_slice().expect("standard layout"));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w", self.w.as_slice_mut().expect("standard layout"));
        f("b", self.b.as_slice_mut().expect("standard layout"));
    }
}

/// Layer normalization over the last axis with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: 1e-5,
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
            eps: self.eps,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            *is = 1.0 / (var + self.eps).sqrt();
            let s = *is;
            row.mapv_inplace(|v| (v - mean) * s);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        let d = dy.ncols() as f64;
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));

        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((dxh_row, xh_row), &is), mut dx_row) in dxhat
            .rows()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
            .zip(dx.rows_mut())
        {
            let mean_dxh = dxh_row.sum() / d;
            let mean_dxh_xh = dxh_row
                .iter()
                .zip(xh_row.iter())
                .map(|(&a, &b)| a * b)
                .sum::<f64>()
                / d;
            for ((&dxh, &xh), out) in dxh_row.iter().zip(xh_row.iter()).zip(dx_row.iter_mut()) {
                *out = is * (dxh - mean_dxh - xh * mean_dxh_xh);
            }
        }
        dx
    }
}

impl Parameterized for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("gamma", self.gamma.as_slice().expect("standard layout"));
        f("beta", self.beta.as_slice().expect("standard layout"));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("gamma", self.gamma.as_slice_mut().expect("standard layout"));
        f("beta", self.beta.as_slice_mut().expect("standard layout"));
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each non-final layer.
    pre_acts: Vec<Array2<f64>>,
}

impl Mlp {
    /// `dims = [d_in, h_1, ..., d_out]` gives `dims.len() - 1` layers.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(last);
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let z = layer.forward(&cur);
            if i < last {
                pre_acts.push(z.clone());
                cur = z.mapv(gelu);
            } else {
                cur = z;
            }
        }
        (cur, MlpCache { inputs, pre_acts })
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                let pre = &cache.pre_acts[i];
                d = &d * &pre.mapv(gelu_grad);
            }
            d = self.layers[i].backward(&cache.inputs[i], &d, &mut grad.layers[i]);
        }
        d
    }
}

impl Parameterized for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&mut |name, s| f(&format!("layer{i}.{name}"), s));
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&mut |name, s| f(&format!("layer{i}.{name}"), s));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{
        assign_params, central_difference, flatten_params, max_gradient_rel_error, Parameterized,
    };
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Finite-difference check of a layer's parameter and input gradients
    /// through a fixed quadratic readout of the output.
    fn check_param_grads<P: Parameterized + Clone>(
        layer: &mut P,
        forward_loss: &mut dyn FnMut(&P) -> f64,
        analytic: &[f64],
        tol: f64,
    ) {
        let mut flat = flatten_params(layer);
        let mut layer2 = layer.clone();
        let mut f = |p: &[f64]| {
            assign_params(&mut layer2, p);
            forward_loss(&layer2)
        };
        let numeric = central_difference(&mut f, &mut flat, 1e-5);
        let err = max_gradient_rel_error(analytic, &numeric);
        assert!(err < tol, "max rel err {err}");
    }

    #[test]
    fn linear_forward_known_values() {
        let l = Linear {
            w: array![[1.0, 2.0], [3.0, 4.0]],
            b: array![0.5, -0.5],
        };
        let y = l.forward(&array![[1.0, 1.0]]);
        assert_eq!(y, array![[4.5, 5.5]]);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = Linear::new(4, 3, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let target = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));

        let (_, dy) = crate::nn::mse_and_grad(&layer.forward(&x), &target);
        let mut grad = layer.zeros_like();
        let dx = layer.backward(&x, &dy, &mut grad);
        let analytic = flatten_params(&grad);
        let xc = x.clone();
        let tc = target.clone();
        check_param_grads(
            &mut layer,
            &mut |l: &Linear| crate::nn::mse_and_grad(&l.forward(&xc), &tc).0,
            &analytic,
            1e-4,
        );

        // input gradient
        let mut xflat: Vec<f64> = x.iter().cloned().collect();
        let l2 = layer.clone();
        let mut f = |p: &[f64]| {
            let xm = Array2::from_shape_vec((5, 4), p.to_vec()).unwrap();
            crate::nn::mse_and_grad(&l2.forward(&xm), &target).0
        };
        let numeric = central_difference(&mut f, &mut xflat, 1e-5);
        let analytic_dx: Vec<f64> = dx.iter().cloned().collect();
        assert!(max_gradient_rel_error(&analytic_dx, &numeric) < 1e-4);
    }

    #[test]
    fn layernorm_output_is_normalized() {
        let ln = LayerNorm::new(4);
        let x = array![[1.0, 2.0, 3.0, 4.0], [10.0, 10.0, 10.0, 10.0]];
        let (y, _) = ln.forward(&x);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-9);
        }
        // constant row normalizes to zeros under the eps guard
        assert!(y.row(1).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ln = LayerNorm::new(6);
        // give gamma/beta non-trivial values so their gradients are exercised
        ln.gamma = Array1::from_shape_fn(6, |_| rng.gen_range(0.5..1.5));
        ln.beta = Array1::from_shape_fn(6, |_| rng.gen_range(-0.5..0.5));
        let x = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-2.0..2.0));
        let target = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));

        let (y, cache) = ln.forward(&x);
        let (_, dy) = crate::nn::mse_and_grad(&y, &target);
        let mut grad = ln.zeros_like();
        let dx = ln.backward(&cache, &dy, &mut grad);
        let analytic = flatten_params(&grad);
        let xc = x.clone();
        let tc = target.clone();
        check_param_grads(
            &mut ln,
            &mut |l: &LayerNorm| crate::nn::mse_and_grad(&l.forward(&xc).0, &tc).0,
            &analytic,
            1e-4,
        );

        let mut xflat: Vec<f64> = x.iter().cloned().collect();
        let lnc = ln.clone();
        let mut f = |p: &[f64]| {
            let xm = Array2::from_shape_vec((4, 6), p.to_vec()).unwrap();
            crate::nn::mse_and_grad(&lnc.forward(&xm).0, &target).0
        };
        let numeric = central_difference(&mut f, &mut xflat, 1e-5);
        let analytic_dx: Vec<f64> = dx.iter().cloned().collect();
        assert!(max_gradient_rel_error(&analytic_dx, &numeric) < 1e-4);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::new(&[3, 5, 4, 2], &mut rng);
        let x = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let target = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));

        let (y, cache) = mlp.forward(&x);
        let (_, dy) = crate::nn::mse_and_grad(&y, &target);
        let mut grad = mlp.zeros_like();
        mlp.backward(&cache, &dy, &mut grad);
        let analytic = flatten_params(&grad);
        let xc = x.clone();
        let tc = target.clone();
        check_param_grads(
            &mut mlp,
            &mut |m: &Mlp| crate::nn::mse_and_grad(&m.forward(&xc).0, &tc).0,
            &analytic,
            1e-4,
        );
    }

    #[test]
    fn mlp_layer_count_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::new(&[8, 16, 16, 4], &mut rng);
        assert_eq!(mlp.layers.len(), 3);
        assert_eq!(mlp.layers[0].w.shape(), &[8, 16]);
        assert_eq!(mlp.layers[2].w.shape(), &[16, 4]);
        let (y, _) = mlp.forward(&Array2::zeros((2, 8)));
        assert_eq!(y.shape(), &[2, 4]);
    }
}
