//! 2-D convolution (stride 1, same padding) and nearest-neighbor upsampling.
//!
//! The convolution runs on raw slices with row-wise accumulation so the
//! inner loops vectorize; at the spatial sizes used here (≤ 28×28) that is
//! plenty fast without an im2col buffer.

use ndarray::{Array1, Array4};
use rand::Rng;

use super::Parameterized;

/// `y = conv(x, w) + b` with weight `[c_out, c_in, k, k]`, odd `k`,
/// padding `k/2`, stride 1. Input and output are `[n, c, h, w]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
}

pub struct Conv2dCache {
    x: Array4<f64>,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Self {
        assert!(k % 2 == 1, "kernel must be odd for same padding");
        let bound = 1.0 / ((c_in * k * k).max(1) as f64).sqrt();
        Conv2d {
            w: Array4::from_shape_fn((c_out, c_in, k, k), |_| rng.gen_range(-bound..bound)),
            b: Array1::from_shape_fn(c_out, |_| rng.gen_range(-bound..bound)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            w: Array4::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Conv2dCache) {
        let (n, cin, h, w) = x.dim();
        let (cout, cin2, k, _) = self.w.dim();
        assert_eq!(cin, cin2, "channel mismatch");
        let p = k / 2;
        let mut y = Array4::zeros((n, cout, h, w));
        {
            let xs = x.as_slice().expect("standard layout");
            let ws = self.w.as_slice().expect("standard layout");
            let ys = y.as_slice_mut().expect("standard layout");
            for ni in 0..n {
                for co in 0..cout {
                    let ybase = (ni * cout + co) * h * w;
                    ys[ybase..ybase + h * w].fill(self.b[co]);
                    for ci in 0..cin {
                        let xbase = (ni * cin + ci) * h * w;
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = ws[((co * cin + ci) * k + ky) * k + kx];
                                let x0 = p.saturating_sub(kx);
                                let x1 = (w + p).saturating_sub(kx).min(w);
                                if x0 >= x1 {
                                    continue;
                                }
                                let shift = kx as isize - p as isize;
                                for yo in 0..h {
                                    let yi = yo as isize + ky as isize - p as isize;
                                    if yi < 0 || yi >= h as isize {
                                        continue;
                                    }
                                    let yrow = ybase + yo * w;
                                    let xrow = xbase + yi as usize * w;
                                    let s0 = (xrow as isize + x0 as isize + shift) as usize;
                                    let src = &xs[s0..s0 + (x1 - x0)];
                                    let dst = &mut ys[yrow + x0..yrow + x1];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d += wv * *s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (y, Conv2dCache { x: x.clone() })
    }

    pub fn backward(
        &self,
        cache: &Conv2dCache,
        dy: &Array4<f64>,
        grad: &mut Conv2d,
    ) -> Array4<f64> {
        let x = &cache.x;
        let (n, cin, h, w) = x.dim();
        let (cout, _, k, _) = self.w.dim();
        let p = k / 2;
        let mut dx = Array4::zeros(x.raw_dim());
        {
            let xs = x.as_slice().expect("standard layout");
            let ws = self.w.as_slice().expect("standard layout");
            let dys = dy.as_slice().expect("standard layout");
            let dxs = dx.as_slice_mut().expect("standard layout");
            let gws = grad.w.as_slice_mut().expect("standard layout");
            for ni in 0..n {
                for co in 0..cout {
                    let ybase = (ni * cout + co) * h * w;
                    grad.b[co] += dys[ybase..ybase + h * w].iter().sum::<f64>();
                    for ci in 0..cin {
                        let xbase = (ni * cin + ci) * h * w;
                        for ky in 0..k {
                            for kx in 0..k {
                                let widx = ((co * cin + ci) * k + ky) * k + kx;
                                let wv = ws[widx];
                                let x0 = p.saturating_sub(kx);
                                let x1 = (w + p).saturating_sub(kx).min(w);
                                if x0 >= x1 {
                                    continue;
                                }
                                let shift = kx as isize - p as isize;
                                let mut wacc = 0.0;
                                for yo in 0..h {
                                    let yi = yo as isize + ky as isize - p as isize;
                                    if yi < 0 || yi >= h as isize {
                                        continue;
                                    }
                                    let yrow = ybase + yo * w;
                                    let xrow = xbase + yi as usize * w;
                                    let s0 = (xrow as isize + x0 as isize + shift) as usize;
                                    let dyrow = &dys[yrow + x0..yrow + x1];
                                    let xslice = &xs[s0..s0 + (x1 - x0)];
                                    let dxslice = &mut dxs[s0..s0 + (x1 - x0)];
                                    for ((&g, &xv), dxv) in
                                        dyrow.iter().zip(xslice).zip(dxslice.iter_mut())
                                    {
                                        wacc += g * xv;
                                        *dxv += wv * g;
                                    }
                                }
                                gws[widx] += wacc;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Parameterized for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("w", self.w.as_slice().expect("standard layout"));
        f("b", self.b.as_slice().expect("standard layout"));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w", self.w.as_slice_mut().expect("standard layout"));
        f("b", self.b.as_slice_mut().expect("standard layout"));
    }
}

/// Parameter-free nearest-neighbor upsampling by an integer factor.
/// Factor 1 is the identity (used where a stage keeps its resolution).
#[derive(Debug, Clone, Copy)]
pub struct Upsample2d {
    pub factor: usize,
}

impl Upsample2d {
    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let f = self.factor;
        let (n, c, h, w) = x.dim();
        Array4::from_shape_fn((n, c, h * f, w * f), |(ni, ci, y, xx)| {
            x[[ni, ci, y / f, xx / f]]
        })
    }

    /// Gradient is the sum over each `factor × factor` block.
    pub fn backward(&self, dy: &Array4<f64>) -> Array4<f64> {
        let f = self.factor;
        let (n, c, hf, wf) = dy.dim();
        let (h, w) = (hf / f, wf / f);
        let mut dx = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..hf {
                    for x in 0..wf {
                        dx[[ni, ci, y / f, x / f]] += dy[[ni, ci, y, x]];
                    }
                }
            }
        }
        dx
    }
}
