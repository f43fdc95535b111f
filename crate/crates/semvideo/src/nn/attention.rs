//! Multi-head scaled dot-product attention with an output projection.
//!
//! One struct covers every use in the crate: self-attention (`ctx == x`),
//! cross-attention (separate context), and causal self-attention (upper
//! triangle masked). The forward pass keeps the per-head attention weights
//! in its cache so callers can inspect them.

use ndarray::{s, Array2, Array3};
use rand::Rng;

use super::{softmax_rows, softmax_rows_backward, Linear, Parameterized};

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub head_dim: usize,
    pub causal: bool,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

pub struct AttentionCache {
    x: Array2<f64>,
    ctx: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    concat: Array2<f64>,
    /// Per-head attention weights, `[heads, t_query, t_context]`.
    pub attn: Array3<f64>,
}

impl MultiHeadAttention {
    /// `d_query`/`d_context` are the input widths; the output width is
    /// `d_out`. Internally every head uses `head_dim` channels.
    pub fn new(
        d_query: usize,
        d_context: usize,
        d_out: usize,
        heads: usize,
        head_dim: usize,
        causal: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let inner = heads * head_dim;
        MultiHeadAttention {
            heads,
            head_dim,
            causal,
            wq: Linear::new(d_query, inner, rng),
            wk: Linear::new(d_context, inner, rng),
            wv: Linear::new(d_context, inner, rng),
            wo: Linear::new(inner, d_out, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        MultiHeadAttention {
            heads: self.heads,
            head_dim: self.head_dim,
            causal: self.causal,
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
        }
    }

    /// `x: [t_query, d_query]`, `ctx: [t_context, d_context]`. For
    /// self-attention pass the same array twice (`backward` then returns the
    /// two gradient contributions separately; add them).
    pub fn forward(&self, x: &Array2<f64>, ctx: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let (tq, tk) = (x.nrows(), ctx.nrows());
        if self.causal {
            assert_eq!(tq, tk, "causal attention needs square weights");
        }
        let q = self.wq.forward(x);
        let k = self.wk.forward(ctx);
        let v = self.wv.forward(ctx);
        let scale = 1.0 / (self.head_dim as f64).sqrt();

        let mut attn = Array3::zeros((self.heads, tq, tk));
        let mut concat = Array2::zeros((tq, self.heads * self.head_dim));
        for h in 0..self.heads {
            let cols = s![.., h * self.head_dim..(h + 1) * self.head_dim];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t()) * scale;
            if self.causal {
                for i in 0..tq {
                    for j in (i + 1)..tk {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
            }
            let a = softmax_rows(&scores);
            concat.slice_mut(cols).assign(&a.dot(&vh));
            attn.slice_mut(s![h, .., ..]).assign(&a);
        }
        let y = self.wo.forward(&concat);
        (
            y,
            AttentionCache {
                x: x.clone(),
                ctx: ctx.clone(),
                q,
                k,
                v,
                concat,
                attn,
            },
        )
    }

    /// Returns `(dx, dctx)`. Parameter gradients accumulate into `grad`.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Array2<f64>,
        grad: &mut MultiHeadAttention,
    ) -> (Array2<f64>, Array2<f64>) {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let dconcat = self.wo.backward(&cache.concat, dy, &mut grad.wo);

        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * self.head_dim..(h + 1) * self.head_dim];
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let vh = cache.v.slice(cols);
            let a = cache.attn.slice(s![h, .., ..]);
            let doh = dconcat.slice(cols);

            let da = doh.dot(&vh.t());
            dv.slice_mut(cols).assign(&a.t().dot(&doh));
            let dscores = softmax_rows_backward(&a.to_owned(), &da);
            dq.slice_mut(cols).assign(&(dscores.dot(&kh) * scale));
            dk.slice_mut(cols).assign(&(dscores.t().dot(&qh) * scale));
        }
        let dx = self.wq.backward(&cache.x, &dq, &mut grad.wq);
        let dctx = self.wk.backward(&cache.ctx, &dk, &mut grad.wk)
            + self.wv.backward(&cache.ctx, &dv, &mut grad.wv);
        (dx, dctx)
    }
}

impl Parameterized for MultiHeadAttention {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.wq.visit(&mut |n, s| f(&format!("wq.{n}"), s));
        self.wk.visit(&mut |n, s| f(&format!("wk.{n}"), s));
        self.wv.visit(&mut |n, s| f(&format!("wv.{n}"), s));
        self.wo.visit(&mut |n, s| f(&format!("wo.{n}"), s));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.wq.visit_mut(&mut |n, s| f(&format!("wq.{n}"), s));
        self.wk.visit_mut(&mut |n, s| f(&format!("wk.{n}"), s));
        self.wv.visit_mut(&mut |n, s| f(&format!("wv.{n}"), s));
        self.wo.visit_mut(&mut |n, s| f(&format!("wo.{n}"), s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{
        assign_params, central_difference, flatten_params, max_gradient_rel_error, mse_and_grad,
    };
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mha = MultiHeadAttention::new(6, 6, 6, 2, 4, false, &mut rng);
        let x = Array2::from_shape_fn((5, 6), |_| rng.gen_range(-1.0..1.0));
        let (_, cache) = mha.forward(&x, &x);
        for h in 0..2 {
            for i in 0..5 {
                let sum: f64 = (0..5).map(|j| cache.attn[[h, i, j]]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_mask_zeroes_future_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mha = MultiHeadAttention::new(4, 4, 4, 1, 4, true, &mut rng);
        let x = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        let (_, cache) = mha.forward(&x, &x);
        for i in 0..6 {
            for j in (i + 1)..6 {
                assert_eq!(cache.attn[[0, i, j]], 0.0, "attn[{i},{j}] must be masked");
            }
            let sum: f64 = (0..=i).map(|j| cache.attn[[0, i, j]]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_attention_averages_values() {
        // zero q/k weights give constant scores, so attention is uniform and
        // the output (with identity-ish v, o) is the running mean of inputs
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mha = MultiHeadAttention::new(3, 3, 3, 1, 3, true, &mut rng);
        mha.wq.w.fill(0.0);
        mha.wq.b.fill(0.0);
        mha.wk.w.fill(0.0);
        mha.wk.b.fill(0.0);
        mha.wv.w = Array2::eye(3);
        mha.wv.b.fill(0.0);
        mha.wo.w = Array2::eye(3);
        mha.wo.b.fill(0.0);
        let x = ndarray::array![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
        let (y, _) = mha.forward(&x, &x);
        // causal row i = mean of rows 0..=i
        assert!((y[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((y[[1, 0]] - 0.5).abs() < 1e-12);
        assert!((y[[1, 1]] - 1.0).abs() < 1e-12);
        assert!((y[[2, 2]] - 1.0).abs() < 1e-12);
    }

    fn fd_check(causal: bool, heads: usize, cross: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + heads as u64);
        let (dq, dctx_w, dout) = (5, 4, 3);
        let tq = 4;
        let tk = if causal { tq } else { 6 };
        let mha = MultiHeadAttention::new(dq, if cross { dctx_w } else { dq }, dout, heads, 3, causal, &mut rng);
        let x = Array2::from_shape_fn((tq, dq), |_| rng.gen_range(-1.0..1.0));
        let ctx = if cross {
            Array2::from_shape_fn((tk, dctx_w), |_| rng.gen_range(-1.0..1.0))
        } else {
            x.clone()
        };
        let target = Array2::from_shape_fn((tq, dout), |_| rng.gen_range(-1.0..1.0));

        let (y, cache) = mha.forward(&x, &ctx);
        let (_, dy) = mse_and_grad(&y, &target);
        let mut grad = mha.zeros_like();
        let (dx, dctx) = mha.backward(&cache, &dy, &mut grad);
        let analytic = flatten_params(&grad);

        // parameters
        let mut flat = flatten_params(&mha);
        let mut m2 = mha.clone();
        let (xc, cc, tc) = (x.clone(), ctx.clone(), target.clone());
        let mut f = |p: &[f64]| {
            assign_params(&mut m2, p);
            mse_and_grad(&m2.forward(&xc, &cc).0, &tc).0
        };
        let numeric = central_difference(&mut f, &mut flat, 1e-5);
        let err = max_gradient_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "param grad err {err}");

        // inputs: for self-attention the total input gradient is dx + dctx
        let mut xflat: Vec<f64> = x.iter().cloned().collect();
        let m3 = mha.clone();
        let ctx2 = ctx.clone();
        let mut fx = |p: &[f64]| {
            let xm = Array2::from_shape_vec((tq, dq), p.to_vec()).unwrap();
            let c = if cross { ctx2.clone() } else { xm.clone() };
            mse_and_grad(&m3.forward(&xm, &c).0, &target).0
        };
        let numeric_x = central_difference(&mut fx, &mut xflat, 1e-5);
        let total_dx = if cross { dx.clone() } else { &dx + &dctx };
        let analytic_x: Vec<f64> = total_dx.iter().cloned().collect();
        let err = max_gradient_rel_error(&analytic_x, &numeric_x);
        assert!(err < 1e-4, "input grad err {err}");

        if cross {
            let mut cflat: Vec<f64> = ctx.iter().cloned().collect();
            let m4 = mha.clone();
            let x2 = x.clone();
            let mut fc = |p: &[f64]| {
                let cm = Array2::from_shape_vec((tk, dctx_w), p.to_vec()).unwrap();
                mse_and_grad(&m4.forward(&x2, &cm).0, &target).0
            };
            let numeric_c = central_difference(&mut fc, &mut cflat, 1e-5);
            let analytic_c: Vec<f64> = dctx.iter().cloned().collect();
            let err = max_gradient_rel_error(&analytic_c, &numeric_c);
            assert!(err < 1e-4, "context grad err {err}");
        }
    }

    #[test]
    fn self_attention_gradients_match_finite_differences() {
        fd_check(false, 2, false);
    }

    #[test]
    fn causal_attention_gradients_match_finite_differences() {
        fd_check(true, 2, false);
    }

    #[test]
    fn cross_attention_gradients_match_finite_differences() {
        fd_check(false, 1, true);
    }
}
