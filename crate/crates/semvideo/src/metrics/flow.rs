//! Optical flow, end-point error, and the frame-order shuffle test.
//!
//! Motion fidelity is judged by comparing flow fields estimated on the
//! reconstruction against fields estimated on the ground truth, rather than
//! by comparing pixels: a reconstruction can be blurry yet move correctly,
//! or sharp yet static. [`estimate_flow`] is a small coarse-to-fine
//! estimator (3-level pyramid, windowed least squares with a ridge term
//! that pulls unconstrained regions toward zero motion). [`epe`] averages
//! the per-pixel Euclidean distance between two fields, and
//! [`shuffle_test`] asks how often a random reordering of the reconstructed
//! frames explains the ground-truth motion better than the order the model
//! actually produced.

use super::grayscale;
use crate::error::{Error, Result};
use crate::render::VideoClip;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Minimum frame side length accepted by [`estimate_flow`].
///
/// Below this the 3-level pyramid bottoms out at windows larger than the
/// image and the estimate is meaningless.
pub const MIN_FLOW_SIZE: usize = 16;

const PYRAMID_LEVELS: usize = 3;
const ITERS_PER_LEVEL: usize = 4;
const WINDOW_RADIUS: usize = 2;
const RIDGE: f64 = 1e-3;

/// A dense motion field between two frames: `u` is horizontal displacement
/// in pixels, `v` vertical, both `[h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            u: Array2::zeros((h, w)),
            v: Array2::zeros((h, w)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.u.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.u.dim() != self.v.dim() {
            return Err(Error::Validation(format!(
                "flow components must share shape, got {:?} vs {:?}",
                self.u.dim(),
                self.v.dim()
            )));
        }
        if self.u.iter().chain(self.v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Validation("flow field contains non-finite values".into()));
        }
        Ok(())
    }
}

fn bilinear(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;
    img[[y0, x0]] * (1.0 - fy) * (1.0 - fx)
        + img[[y0, x1]] * (1.0 - fy) * fx
        + img[[y1, x0]] * fy * (1.0 - fx)
        + img[[y1, x1]] * fy * fx
}

fn downsample(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(y, x)| {
        (img[[2 * y, 2 * x]]
            + img[[2 * y, 2 * x + 1]]
            + img[[2 * y + 1, 2 * x]]
            + img[[2 * y + 1, 2 * x + 1]])
            / 4.0
    })
}

fn upsample_flow(f: &Array2<f64>, ho: usize, wo: usize) -> Array2<f64> {
    let (h, w) = f.dim();
    let scale = ho as f64 / h as f64;
    Array2::from_shape_fn((ho, wo), |(y, x)| {
        f[[(y * h / ho).min(h - 1), (x * w / wo).min(w - 1)]] * scale
    })
}

fn box3(f: &Array2<f64>) -> Array2<f64> {
    let (h, w) = f.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let y0 = y.saturating_sub(1);
        let y1 = (y + 1).min(h - 1);
        let x0 = x.saturating_sub(1);
        let x1 = (x + 1).min(w - 1);
        let mut acc = 0.0;
        let mut n = 0.0;
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                acc += f[[yy, xx]];
                n += 1.0;
            }
        }
        acc / n
    })
}

/// One level of windowed least-squares refinement with warping.
fn refine_level(a: &Array2<f64>, b: &Array2<f64>, u: &mut Array2<f64>, v: &mut Array2<f64>) {
    let (h, w) = a.dim();
    for _ in 0..ITERS_PER_LEVEL {
        let warped = Array2::from_shape_fn((h, w), |(y, x)| {
            bilinear(b, y as f64 + v[[y, x]], x as f64 + u[[y, x]])
        });
        // Gradients of the average image, temporally centred.
        let avg = (a + &warped) * 0.5;
        let gx = Array2::from_shape_fn((h, w), |(y, x)| {
            let x0 = x.saturating_sub(1);
            let x1 = (x + 1).min(w - 1);
            (avg[[y, x1]] - avg[[y, x0]]) / (x1 - x0).max(1) as f64
        });
        let gy = Array2::from_shape_fn((h, w), |(y, x)| {
            let y0 = y.saturating_sub(1);
            let y1 = (y + 1).min(h - 1);
            (avg[[y1, x]] - avg[[y0, x]]) / (y1 - y0).max(1) as f64
        });
        let it = &warped - a;

        let mut du = Array2::<f64>::zeros((h, w));
        let mut dv = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let y0 = y.saturating_sub(WINDOW_RADIUS);
                let y1 = (y + WINDOW_RADIUS).min(h - 1);
                let x0 = x.saturating_sub(WINDOW_RADIUS);
                let x1 = (x + WINDOW_RADIUS).min(w - 1);
                let (mut sxx, mut syy, mut sxy, mut sxt, mut syt) =
                    (RIDGE, RIDGE, 0.0, 0.0, 0.0);
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        let ix = gx[[yy, xx]];
                        let iy = gy[[yy, xx]];
                        let t = it[[yy, xx]];
                        sxx += ix * ix;
                        syy += iy * iy;
                        sxy += ix * iy;
                        sxt += ix * t;
                        syt += iy * t;
                    }
                }
                let det = sxx * syy - sxy * sxy;
                du[[y, x]] = (-sxt * syy + sxy * syt) / det;
                dv[[y, x]] = (-syt * sxx + sxy * sxt) / det;
            }
        }
        *u = box3(&(&*u + &du));
        *v = box3(&(&*v + &dv));
    }
}

/// Estimates dense optical flow from `a` to `b` (both grayscale `[h, w]`).
///
/// Coarse-to-fine over a 3-level pyramid; each level runs a few rounds of
/// warped, windowed least squares with a ridge term, so featureless or
/// identical inputs come back as exactly zero motion instead of noise.
/// Displacements are reliable well below the coarsest level's window,
/// roughly 16 px at full resolution; frames must be at least
/// [`MIN_FLOW_SIZE`] on each side.
pub fn estimate_flow(a: &Array2<f64>, b: &Array2<f64>) -> Result<FlowField> {
    if a.dim() != b.dim() {
        return Err(Error::Validation(format!(
            "flow needs equal shapes, got {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w) = a.dim();
    if h < MIN_FLOW_SIZE || w < MIN_FLOW_SIZE {
        return Err(Error::Validation(format!(
            "flow estimation needs frames of at least {MIN_FLOW_SIZE}x{MIN_FLOW_SIZE}, got {h}x{w}"
        )));
    }
    if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Validation("flow input contains non-finite values".into()));
    }

    let mut pyr_a = vec![a.clone()];
    let mut pyr_b = vec![b.clone()];
    for _ in 1..PYRAMID_LEVELS {
        pyr_a.push(downsample(pyr_a.last().unwrap()));
        pyr_b.push(downsample(pyr_b.last().unwrap()));
    }

    let (ch, cw) = pyr_a.last().unwrap().dim();
    let mut u = Array2::<f64>::zeros((ch, cw));
    let mut v = Array2::<f64>::zeros((ch, cw));
    for level in (0..PYRAMID_LEVELS).rev() {
        let (lh, lw) = pyr_a[level].dim();
        if u.dim() != (lh, lw) {
            u = upsample_flow(&u, lh, lw);
            v = upsample_flow(&v, lh, lw);
        }
        refine_level(&pyr_a[level], &pyr_b[level], &mut u, &mut v);
    }
    let field = FlowField { u, v };
    field.validate()?;
    Ok(field)
}

/// Mean end-point error between two flow fields of equal shape: the
/// per-pixel Euclidean distance between displacement vectors, averaged.
pub fn epe(a: &FlowField, b: &FlowField) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::Validation(format!(
            "end-point error needs equal field shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.u.len() as f64;
    let mut acc = 0.0;
    for ((&ua, &ub), (&va, &vb)) in a
        .u
        .iter()
        .zip(b.u.iter())
        .zip(a.v.iter().zip(b.v.iter()))
    {
        let du = ua - ub;
        let dv = va - vb;
        acc += (du * du + dv * dv).sqrt();
    }
    Ok(acc / n)
}

fn gray_frames(clip: &VideoClip) -> Vec<Array2<f64>> {
    clip.frames.outer_iter().map(grayscale).collect()
}

/// Flow fields between each adjacent frame pair of a clip.
pub fn clip_flows(clip: &VideoClip) -> Result<Vec<FlowField>> {
    clip.validate()?;
    if clip.n_frames() < 2 {
        return Err(Error::Validation(format!(
            "flow needs at least 2 frames, clip '{}' has {}",
            clip.clip_id,
            clip.n_frames()
        )));
    }
    let grays = gray_frames(clip);
    grays
        .windows(2)
        .map(|pair| estimate_flow(&pair[0], &pair[1]))
        .collect()
}

/// Mean end-point error between the adjacent-pair flows of a reconstruction
/// and its ground truth. Clips must share shape and have at least 2 frames.
pub fn clip_epe(recon: &VideoClip, gt: &VideoClip) -> Result<f64> {
    let rf = clip_flows(recon)?;
    let gf = clip_flows(gt)?;
    if rf.len() != gf.len() {
        return Err(Error::Validation(format!(
            "paired clips must have equal frame counts, got {} vs {}",
            recon.n_frames(),
            gt.n_frames()
        )));
    }
    let mut acc = 0.0;
    for (a, b) in rf.iter().zip(gf.iter()) {
        acc += epe(a, b)?;
    }
    Ok(acc / rf.len() as f64)
}

type FlowCache = HashMap<(usize, usize), FlowField>;

fn order_epe_cached(
    grays: &[Array2<f64>],
    order: &[usize],
    gt_flows: &[FlowField],
    cache: &mut FlowCache,
) -> Result<f64> {
    let mut acc = 0.0;
    for (k, pair) in order.windows(2).enumerate() {
        let key = (pair[0], pair[1]);
        if !cache.contains_key(&key) {
            let f = estimate_flow(&grays[key.0], &grays[key.1])?;
            cache.insert(key, f);
        }
        acc += epe(&cache[&key], &gt_flows[k])?;
    }
    Ok(acc / gt_flows.len() as f64)
}

/// End-point error of the reconstruction with its frames visited in
/// `order`, against the ground truth in its natural order.
///
/// `order` must be a permutation of `0..n_frames`. The identity order
/// reproduces [`clip_epe`].
pub fn ordering_epe(recon: &VideoClip, gt: &VideoClip, order: &[usize]) -> Result<f64> {
    recon.validate()?;
    let n = recon.n_frames();
    if order.len() != n {
        return Err(Error::Validation(format!(
            "order has {} entries for a {}-frame clip",
            order.len(),
            n
        )));
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || seen[i] {
            return Err(Error::Validation(format!(
                "order {order:?} is not a permutation of 0..{n}"
            )));
        }
        seen[i] = true;
    }
    let gt_flows = clip_flows(gt)?;
    if gt_flows.len() + 1 != n {
        return Err(Error::Validation(format!(
            "paired clips must have equal frame counts, got {} vs {}",
            n,
            gt.n_frames()
        )));
    }
    let grays = gray_frames(recon);
    let mut cache = FlowCache::new();
    order_epe_cached(&grays, order, &gt_flows, &mut cache)
}

/// Result of [`shuffle_test`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShuffleOutcome {
    /// Fraction of shuffles that beat the produced order (strictly lower
    /// end-point error). Near 0 means the produced order explains the
    /// ground-truth motion about as well as any order can; near 1 means
    /// almost any order does better.
    pub p: f64,
    /// End-point error of the reconstruction in its produced order.
    pub baseline_epe: f64,
    pub n_shuffles: usize,
}

/// Permutation test for motion direction and ordering.
///
/// Draws `n_shuffles` random orderings of the reconstructed frames (seeded)
/// and scores each against the ground-truth flows. A shuffle counts only if
/// its end-point error is *strictly* below the baseline, so ties — e.g. a
/// static reconstruction, where every ordering scores identically — give
/// `p = 0`: the test refuses to flag an ordering as wrong when order makes
/// no difference. Clips need at least 3 frames (with 2 there is only one
/// non-trivial reordering) and equal frame counts.
pub fn shuffle_test(
    recon: &VideoClip,
    gt: &VideoClip,
    n_shuffles: usize,
    seed: u64,
) -> Result<ShuffleOutcome> {
    recon.validate()?;
    let n = recon.n_frames();
    if n < 3 {
        return Err(Error::Validation(format!(
            "shuffle test needs at least 3 frames, got {n}"
        )));
    }
    if n_shuffles == 0 {
        return Err(Error::Validation("shuffle test needs at least 1 shuffle".into()));
    }
    let gt_flows = clip_flows(gt)?;
    if gt_flows.len() + 1 != n {
        return Err(Error::Validation(format!(
            "paired clips must have equal frame counts, got {} vs {}",
            n,
            gt.n_frames()
        )));
    }
    let grays = gray_frames(recon);
    let mut cache = FlowCache::new();
    let identity: Vec<usize> = (0..n).collect();
    let baseline = order_epe_cached(&grays, &identity, &gt_flows, &mut cache)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut better = 0usize;
    let mut order = identity;
    for _ in 0..n_shuffles {
        order.shuffle(&mut rng);
        let e = order_epe_cached(&grays, &order, &gt_flows, &mut cache)?;
        if e < baseline {
            better += 1;
        }
    }
    Ok(ShuffleOutcome {
        p: better as f64 / n_shuffles as f64,
        baseline_epe: baseline,
        n_shuffles,
    })
}
