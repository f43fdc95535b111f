//! Reconstruction quality metrics.
//!
//! Reconstructed clips are scored against ground truth on three levels:
//!
//! * **semantic** — N-way top-1 retrieval in an embedding space
//!   ([`nway_top1`]) and whole-video embedding cosine ([`vifi_score`]);
//! * **pixel** — [`ssim`], [`psnr`], and a hue histogram comparison
//!   ([`hue_similarity`]) that isolates colour fidelity from structure;
//! * **spatiotemporal** — adjacent-frame embedding coherence
//!   ([`clip_pcc`]) plus optical-flow end-point error and the frame-order
//!   shuffle test in the [`flow`] submodule.
//!
//! Embedding-based metrics are abstracted over [`EmbeddingBackend`] so the
//! full evaluation path runs offline: [`StubEmbedder`] is a deterministic
//! stand-in (average-pool + fixed random projection) for the CLIP-family
//! encoders used with real data, and [`RandomEmbedder`] ignores content
//! entirely, which makes chance levels measurable. Aggregation over paired
//! clip sets lives in [`report`], significance testing in [`significance`].

pub mod flow;
pub mod report;
pub mod significance;

use crate::error::{Error, Result};
use crate::render::VideoClip;
use ndarray::{Array1, Array2, ArrayView3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Which embedding space a retrieval metric operates in.
///
/// `Frame` scores static content (per-frame embeddings, averaged over the
/// clip); `Video` scores dynamic content through the backend's whole-video
/// embedding. The two correspond to the image- and video-encoder columns of
/// the evaluation report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMode {
    Frame,
    Video,
}

impl EmbedMode {
    pub fn tag(&self) -> &'static str {
        match self {
            EmbedMode::Frame => "I",
            EmbedMode::Video => "V",
        }
    }
}

/// A (possibly stubbed) pretrained encoder used by embedding-based metrics.
///
/// Implementations must return unit-norm vectors of a fixed dimension; all
/// downstream similarity is plain dot product. `classify_*` is optional —
/// backends without a classification head return `None` and label-based
/// metrics report as unavailable rather than erroring.
pub trait EmbeddingBackend {
    /// Embed a single `[h, w, 3]` frame to a unit vector.
    fn embed_frame(&self, frame: ArrayView3<f32>) -> Result<Array1<f64>>;

    /// Embed a whole clip to a unit vector. Must be sensitive to frame order.
    fn embed_video(&self, clip: &VideoClip) -> Result<Array1<f64>>;

    /// Optional class label for a frame.
    fn classify_frame(&self, _frame: ArrayView3<f32>) -> Result<Option<usize>> {
        Ok(None)
    }

    /// Optional class label for a clip.
    fn classify_video(&self, _clip: &VideoClip) -> Result<Option<usize>> {
        Ok(None)
    }
}

fn normalize_unit(mut v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 1e-12 {
        v.mapv_inplace(|x| x / n);
    }
    v
}

/// Average-pools a frame onto a fixed `grid x grid x 3` feature patch.
///
/// Blocks are integer partitions of the image; frames smaller than the grid
/// fall back to nearest-pixel sampling so tiny test inputs still embed.
fn pool_features(frame: ArrayView3<f32>, grid: usize) -> Array1<f64> {
    let (h, w, _) = frame.dim();
    let mut out = Array1::zeros(grid * grid * 3);
    for gy in 0..grid {
        for gx in 0..grid {
            let y0 = gy * h / grid;
            let y1 = (((gy + 1) * h) / grid).max(y0 + 1).min(h);
            let x0 = gx * w / grid;
            let x1 = (((gx + 1) * w) / grid).max(x0 + 1).min(w);
            let y0 = y0.min(h - 1);
            let x0 = x0.min(w - 1);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..3 {
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += frame[[y, x, c]] as f64;
                    }
                }
                out[(gy * grid + gx) * 3 + c] = acc / count;
            }
        }
    }
    out
}

/// Deterministic stand-in for a pretrained image/video encoder.
///
/// Frames are average-pooled to a 4x4 grid and pushed through a fixed
/// random projection (seeded at construction) onto the unit sphere, so
/// similar pixels give similar embeddings and the whole metric stack is
/// reproducible without model weights. Video embeddings weight frames by
/// position before projecting, which keeps them order-sensitive. A bank of
/// random class directions provides the optional `classify` head.
pub struct StubEmbedder {
    projection: Array2<f64>,
    class_dirs: Array2<f64>,
    grid: usize,
}

impl StubEmbedder {
    pub const DIM: usize = 64;

    pub fn new(seed: u64) -> Self {
        Self::with_classes(seed, 16)
    }

    pub fn with_classes(seed: u64, n_classes: usize) -> Self {
        let grid = 4;
        let dim = Self::DIM;
        let feat = grid * grid * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65_7472_6963_7331);
        let scale = 1.0 / (feat as f64).sqrt();
        let projection = Array2::from_shape_fn((dim, feat), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal) * scale
        });
        let class_dirs = Array2::from_shape_fn((n_classes.max(1), dim), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        StubEmbedder {
            projection,
            class_dirs,
            grid,
        }
    }

    fn project(&self, features: &Array1<f64>) -> Array1<f64> {
        normalize_unit(self.projection.dot(features))
    }

    fn label_of(&self, embedding: &Array1<f64>) -> usize {
        let scores = self.class_dirs.dot(embedding);
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        best
    }

    fn video_features(&self, clip: &VideoClip) -> Result<Array1<f64>> {
        clip.validate()?;
        let n = clip.n_frames();
        let feat = self.grid * self.grid * 3;
        let mut acc = Array1::<f64>::zeros(feat);
        let mut total = 0.0;
        for (i, frame) in clip.frames.outer_iter().enumerate() {
            let weight = (i + 1) as f64;
            acc = acc + pool_features(frame, self.grid) * weight;
            total += weight;
        }
        debug_assert!(n > 0 && total > 0.0);
        Ok(acc / total)
    }
}

impl EmbeddingBackend for StubEmbedder {
    fn embed_frame(&self, frame: ArrayView3<f32>) -> Result<Array1<f64>> {
        check_frame(frame)?;
        Ok(self.project(&pool_features(frame, self.grid)))
    }

    fn embed_video(&self, clip: &VideoClip) -> Result<Array1<f64>> {
        let features = self.video_features(clip)?;
        Ok(self.project(&features))
    }

    fn classify_frame(&self, frame: ArrayView3<f32>) -> Result<Option<usize>> {
        let e = self.embed_frame(frame)?;
        Ok(Some(self.label_of(&e)))
    }

    fn classify_video(&self, clip: &VideoClip) -> Result<Option<usize>> {
        let e = self.embed_video(clip)?;
        Ok(Some(self.label_of(&e)))
    }
}

/// A backend whose embeddings are unrelated to content.
///
/// Each distinct input hashes (with the seed) to a fixed random unit vector,
/// so repeated calls are deterministic but similarity carries no signal.
/// Retrieval against this backend measures chance level.
pub struct RandomEmbedder {
    seed: u64,
    dim: usize,
}

impl RandomEmbedder {
    pub fn new(seed: u64) -> Self {
        RandomEmbedder { seed, dim: 64 }
    }

    fn embed_bytes(&self, tag: u8, bytes: &[u8]) -> Array1<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update([tag]);
        hasher.update(bytes);
        let digest = hasher.finalize();
        let mut key = [0u8; 8];
        key.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(key));
        normalize_unit(Array1::from_shape_fn(self.dim, |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        }))
    }
}

impl EmbeddingBackend for RandomEmbedder {
    fn embed_frame(&self, frame: ArrayView3<f32>) -> Result<Array1<f64>> {
        check_frame(frame)?;
        let mut bytes = Vec::with_capacity(frame.len() * 4 + 12);
        for &d in frame.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in frame.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Ok(self.embed_bytes(0, &bytes))
    }

    fn embed_video(&self, clip: &VideoClip) -> Result<Array1<f64>> {
        clip.validate()?;
        let mut bytes = Vec::with_capacity(clip.frames.len() * 4 + 16);
        for &d in clip.frames.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in clip.frames.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Ok(self.embed_bytes(1, &bytes))
    }
}

fn check_frame(frame: ArrayView3<f32>) -> Result<()> {
    let (h, w, c) = frame.dim();
    if h == 0 || w == 0 || c != 3 {
        return Err(Error::Validation(format!(
            "expected a non-empty [h, w, 3] frame, got [{h}, {w}, {c}]"
        )));
    }
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("frame contains non-finite values".into()));
    }
    Ok(())
}

fn embed_clip(clip: &VideoClip, backend: &dyn EmbeddingBackend, mode: EmbedMode) -> Result<Array1<f64>> {
    match mode {
        EmbedMode::Video => backend.embed_video(clip),
        EmbedMode::Frame => {
            clip.validate()?;
            let mut acc: Option<Array1<f64>> = None;
            for frame in clip.frames.outer_iter() {
                let e = backend.embed_frame(frame)?;
                acc = Some(match acc {
                    None => e,
                    Some(a) => a + e,
                });
            }
            Ok(normalize_unit(acc.expect("validated clip has frames")))
        }
    }
}

/// N-way top-1 retrieval: does the reconstruction land nearest its own
/// ground truth among `N - 1` distractor clips?
///
/// N is `distractors.len() + 1` and must be at least 2. Success requires the
/// true clip's cosine to *strictly* exceed every distractor's, so a
/// distractor identical to the ground truth counts as a miss. With a
/// content-free backend the success rate converges to `1/N`.
pub fn nway_top1(
    recon: &VideoClip,
    gt: &VideoClip,
    distractors: &[&VideoClip],
    backend: &dyn EmbeddingBackend,
    mode: EmbedMode,
) -> Result<bool> {
    if distractors.is_empty() {
        return Err(Error::Validation(
            "n-way retrieval needs at least one distractor (N >= 2)".into(),
        ));
    }
    let query = embed_clip(recon, backend, mode)?;
    let target = embed_clip(gt, backend, mode)?;
    let target_sim = query.dot(&target);
    for d in distractors {
        let e = embed_clip(d, backend, mode)?;
        if query.dot(&e) >= target_sim {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Label-consistency check: do reconstruction and ground truth receive the
/// same class from the backend's classifier?
///
/// Returns `None` when the backend has no classification head.
pub fn label_consistency(
    recon: &VideoClip,
    gt: &VideoClip,
    backend: &dyn EmbeddingBackend,
    mode: EmbedMode,
) -> Result<Option<bool>> {
    let (a, b) = match mode {
        EmbedMode::Video => (backend.classify_video(recon)?, backend.classify_video(gt)?),
        EmbedMode::Frame => {
            recon.validate()?;
            gt.validate()?;
            (
                backend.classify_frame(recon.frames.outer_iter().next().unwrap())?,
                backend.classify_frame(gt.frames.outer_iter().next().unwrap())?,
            )
        }
    };
    Ok(match (a, b) {
        (Some(x), Some(y)) => Some(x == y),
        _ => None,
    })
}

/// Whole-video embedding cosine between reconstruction and ground truth.
///
/// Both embeddings are unit vectors, so the score lies in `[-1, 1]` with 1
/// for identical clips under any deterministic backend.
pub fn vifi_score(recon: &VideoClip, gt: &VideoClip, backend: &dyn EmbeddingBackend) -> Result<f64> {
    let a = backend.embed_video(recon)?;
    let b = backend.embed_video(gt)?;
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "backend returned embeddings of different lengths ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(a.dot(&b))
}

/// Adjacent-frame embedding coherence, gated on semantic quality.
///
/// The score is the mean cosine between embeddings of consecutive frames.
/// When the clip's video-level score `vifi` falls below 0.6 the result is
/// forced to zero: smoothness without semantic content is vacuous (a static
/// wrong image would otherwise score perfectly). The gate is a hard
/// threshold, not a ramp.
pub fn clip_pcc(recon: &VideoClip, backend: &dyn EmbeddingBackend, vifi: f64) -> Result<f64> {
    recon.validate()?;
    let n = recon.n_frames();
    if n < 2 {
        return Err(Error::Validation(format!(
            "frame-coherence metric needs at least 2 frames, got {n}"
        )));
    }
    if vifi < CLIP_PCC_GATE {
        return Ok(0.0);
    }
    let mut prev: Option<Array1<f64>> = None;
    let mut acc = 0.0;
    for frame in recon.frames.outer_iter() {
        let e = backend.embed_frame(frame)?;
        if let Some(p) = prev {
            acc += p.dot(&e);
        }
        prev = Some(e);
    }
    Ok(acc / (n - 1) as f64)
}

/// Video-level score below which [`clip_pcc`] reports zero.
pub const CLIP_PCC_GATE: f64 = 0.6;

// ---------------------------------------------------------------------------
// Pixel-level metrics
// ---------------------------------------------------------------------------

/// Converts an `[h, w, 3]` frame to grayscale (channel mean) in f64.
pub fn grayscale(frame: ArrayView3<f32>) -> Array2<f64> {
    let (h, w, _) = frame.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (frame[[y, x, 0]] as f64 + frame[[y, x, 1]] as f64 + frame[[y, x, 2]] as f64) / 3.0
    })
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter: output is `[h-10, w-10]`.
fn gaussian_valid(img: &Array2<f64>) -> Array2<f64> {
    let k = ssim_kernel();
    let (h, w) = img.dim();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut horiz = Array2::<f64>::zeros((h, wo));
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img[[y, x + i]];
            }
            horiz[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((ho, wo));
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * horiz[[y + i, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Structural similarity between two frames of equal shape.
///
/// Standard formulation: grayscale, 11x11 Gaussian window (sigma 1.5),
/// k1 = 0.01 / k2 = 0.03 at dynamic range 1.0, averaged over all valid
/// window positions. Frames must be at least 11 px on each side.
pub fn ssim(a: ArrayView3<f32>, b: ArrayView3<f32>) -> Result<f64> {
    check_frame(a)?;
    check_frame(b)?;
    if a.dim() != b.dim() {
        return Err(Error::Validation(format!(
            "ssim needs equal shapes, got {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w, _) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let ga = grayscale(a);
    let gb = grayscale(b);
    let mu_a = gaussian_valid(&ga);
    let mu_b = gaussian_valid(&gb);
    let aa = gaussian_valid(&ga.mapv(|v| v * v));
    let bb = gaussian_valid(&gb.mapv(|v| v * v));
    let ab = gaussian_valid(&(&ga * &gb));
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut acc = 0.0;
    let mut count = 0.0;
    for ((y, x), &ma) in mu_a.indexed_iter() {
        let mb = mu_b[[y, x]];
        let va = aa[[y, x]] - ma * ma;
        let vb = bb[[y, x]] - mb * mb;
        let cov = ab[[y, x]] - ma * mb;
        let val = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        acc += val;
        count += 1.0;
    }
    Ok(acc / count)
}

/// Mean SSIM over the paired frames of two clips.
pub fn clip_ssim(recon: &VideoClip, gt: &VideoClip) -> Result<f64> {
    check_paired(recon, gt)?;
    let mut acc = 0.0;
    for (a, b) in recon.frames.outer_iter().zip(gt.frames.outer_iter()) {
        acc += ssim(a, b)?;
    }
    Ok(acc / recon.n_frames() as f64)
}

/// Peak signal-to-noise ratio in dB at dynamic range 1.0.
///
/// `10 * log10(1 / MSE)` over every pixel and channel of the paired clips.
/// Identical clips return `+inf`; aggregation code caps the value (see
/// [`PSNR_CAP_DB`]) so means stay finite.
pub fn psnr(recon: &VideoClip, gt: &VideoClip) -> Result<f64> {
    check_paired(recon, gt)?;
    let n = recon.frames.len() as f64;
    let mut mse = 0.0;
    for (&x, &y) in recon.frames.iter().zip(gt.frames.iter()) {
        let d = x as f64 - y as f64;
        mse += d * d;
    }
    mse /= n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Cap applied to PSNR when averaging, so exact matches don't poison means.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_paired(recon: &VideoClip, gt: &VideoClip) -> Result<()> {
    recon.validate()?;
    gt.validate()?;
    if recon.frames.dim() != gt.frames.dim() {
        return Err(Error::Validation(format!(
            "paired clips must share shape, got {:?} vs {:?} ({} vs {})",
            recon.frames.dim(),
            gt.frames.dim(),
            recon.clip_id,
            gt.clip_id
        )));
    }
    Ok(())
}

/// Hue-circle similarity between two clips, isolating colour fidelity.
///
/// Every pixel maps to a 2-vector on the hue circle, `(cos h, sin h)` for
/// its HSV hue angle; zero-saturation pixels map to the zero vector so gray
/// regions contribute nothing. The score is the cosine between the two
/// stacked vectors, averaged over frames. Opposite hues (red vs cyan) score
/// -1, identical colour layouts 1, and gray frames 0 against anything.
pub fn hue_similarity(recon: &VideoClip, gt: &VideoClip) -> Result<f64> {
    check_paired(recon, gt)?;
    let mut acc = 0.0;
    for (a, b) in recon.frames.outer_iter().zip(gt.frames.outer_iter()) {
        acc += hue_frame_cosine(a, b);
    }
    Ok(acc / recon.n_frames() as f64)
}

fn hue_vector(r: f64, g: f64, b: f64) -> (f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 1e-12 {
        return (0.0, 0.0);
    }
    let h_deg = if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let theta = h_deg.to_radians();
    (theta.cos(), theta.sin())
}

fn hue_frame_cosine(a: ArrayView3<f32>, b: ArrayView3<f32>) -> f64 {
    let (h, w, _) = a.dim();
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (ca, sa) = hue_vector(a[[y, x, 0]] as f64, a[[y, x, 1]] as f64, a[[y, x, 2]] as f64);
            let (cb, sb) = hue_vector(b[[y, x, 0]] as f64, b[[y, x, 1]] as f64, b[[y, x, 2]] as f64);
            dot += ca * cb + sa * sb;
            na += ca * ca + sa * sa;
            nb += cb * cb + sb * sb;
        }
    }
    let denom = na.sqrt() * nb.sqrt();
    if denom <= 1e-12 {
        return 0.0;
    }
    dot / denom
}

/// Resamples a clip to `n` frames by nearest-index mapping.
///
/// Used to align pairs whose frame counts differ (the renderer typically
/// produces more frames than the stimulus clip) before pixel metrics, which
/// require index-wise pairing. `n` must be positive.
pub fn resample_frames(clip: &VideoClip, n: usize) -> Result<VideoClip> {
    clip.validate()?;
    if n == 0 {
        return Err(Error::Validation("cannot resample a clip to 0 frames".into()));
    }
    let src = clip.n_frames();
    let (_, h, w, c) = clip.frames.dim();
    let mut frames = ndarray::Array4::<f32>::zeros((n, h, w, c));
    for i in 0..n {
        let pos = if n == 1 {
            0
        } else {
            // Nearest source index along a uniform [0, src-1] mapping.
            ((i as f64) * (src - 1) as f64 / (n - 1) as f64).round() as usize
        };
        frames
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&clip.frames.index_axis(ndarray::Axis(0), pos.min(src - 1)));
    }
    Ok(VideoClip {
        clip_id: clip.clip_id.clone(),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{Array3, Array4};
    use proptest::prelude::*;
    use rand::Rng;

    fn clip_from(frames: Array4<f32>, id: &str) -> VideoClip {
        VideoClip {
            clip_id: id.to_string(),
            frames,
        }
    }

    fn random_clip(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, id: &str) -> VideoClip {
        clip_from(
            Array4::from_shape_fn((n, h, w, 3), |_| rng.gen::<f32>()),
            id,
        )
    }

    /// Test backend that returns embeddings from a lookup keyed on clip id.
    struct TableBackend {
        table: std::collections::HashMap<String, Array1<f64>>,
    }

    impl EmbeddingBackend for TableBackend {
        fn embed_frame(&self, _frame: ArrayView3<f32>) -> Result<Array1<f64>> {
            unreachable!("table backend is video-only in these tests")
        }

        fn embed_video(&self, clip: &VideoClip) -> Result<Array1<f64>> {
            Ok(self.table[&clip.clip_id].clone())
        }
    }

    #[test]
    fn stub_embeddings_are_unit_norm_and_deterministic() {
        let backend = StubEmbedder::new(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip = random_clip(&mut rng, 3, 9, 9, "a");
        let e1 = backend.embed_video(&clip).unwrap();
        let e2 = backend.embed_video(&clip).unwrap();
        assert_relative_eq!(e1.dot(&e1).sqrt(), 1.0, epsilon = 1e-9);
        assert_eq!(e1, e2);
        let f = backend
            .embed_frame(clip.frames.index_axis(ndarray::Axis(0), 0))
            .unwrap();
        assert_relative_eq!(f.dot(&f).sqrt(), 1.0, epsilon = 1e-9);
        assert_eq!(f.len(), StubEmbedder::DIM);

        // A different seed must give a different projection.
        let other = StubEmbedder::new(8).embed_video(&clip).unwrap();
        assert!((e1.dot(&other) - 1.0).abs() > 1e-6);
    }

    #[test]
    fn stub_video_embedding_is_order_sensitive() {
        let backend = StubEmbedder::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clip = random_clip(&mut rng, 4, 8, 8, "a");
        let mut reversed_frames = clip.frames.clone();
        for i in 0..4 {
            reversed_frames
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&clip.frames.index_axis(ndarray::Axis(0), 3 - i));
        }
        let reversed = clip_from(reversed_frames, "a");
        let e = backend.embed_video(&clip).unwrap();
        let r = backend.embed_video(&reversed).unwrap();
        assert!(e.dot(&r) < 1.0 - 1e-6, "frame order should change the embedding");
    }

    #[test]
    fn nway_identical_recon_beats_orthogonal_distractors() {
        let mut table = std::collections::HashMap::new();
        let mut gt_vec = Array1::zeros(4);
        gt_vec[0] = 1.0;
        let mut d1 = Array1::zeros(4);
        d1[1] = 1.0;
        let mut d2 = Array1::zeros(4);
        d2[2] = 1.0;
        table.insert("recon".to_string(), gt_vec.clone());
        table.insert("gt".to_string(), gt_vec);
        table.insert("d1".to_string(), d1);
        table.insert("d2".to_string(), d2);
        let backend = TableBackend { table };
        let frames = Array4::zeros((1, 2, 2, 3));
        let recon = clip_from(frames.clone(), "recon");
        let gt = clip_from(frames.clone(), "gt");
        let d1 = clip_from(frames.clone(), "d1");
        let d2 = clip_from(frames, "d2");
        assert!(nway_top1(&recon, &gt, &[&d1, &d2], &backend, EmbedMode::Video).unwrap());
    }

    #[test]
    fn nway_tie_with_duplicate_ground_truth_counts_as_miss() {
        let mut table = std::collections::HashMap::new();
        let mut v = Array1::zeros(3);
        v[0] = 1.0;
        table.insert("recon".to_string(), v.clone());
        table.insert("gt".to_string(), v.clone());
        table.insert("dup".to_string(), v);
        let backend = TableBackend { table };
        let frames = Array4::zeros((1, 2, 2, 3));
        let recon = clip_from(frames.clone(), "recon");
        let gt = clip_from(frames.clone(), "gt");
        let dup = clip_from(frames, "dup");
        assert!(!nway_top1(&recon, &gt, &[&dup], &backend, EmbedMode::Video).unwrap());
    }

    #[test]
    fn nway_requires_a_distractor() {
        let backend = StubEmbedder::new(1);
        let frames = Array4::from_elem((1, 4, 4, 3), 0.5f32);
        let recon = clip_from(frames.clone(), "a");
        let gt = clip_from(frames, "b");
        let err = nway_top1(&recon, &gt, &[], &backend, EmbedMode::Frame).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn two_way_retrieval_with_random_backend_sits_at_chance() {
        let backend = RandomEmbedder::new(11);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 10_000;
        let mut hits = 0;
        for t in 0..trials {
            let recon = random_clip(&mut rng, 1, 1, 1, &format!("r{t}"));
            let gt = random_clip(&mut rng, 1, 1, 1, &format!("g{t}"));
            let d = random_clip(&mut rng, 1, 1, 1, &format!("d{t}"));
            if nway_top1(&recon, &gt, &[&d], &backend, EmbedMode::Video).unwrap() {
                hits += 1;
            }
        }
        let acc = hits as f64 / trials as f64;
        assert!(
            (acc - 0.5).abs() <= 0.02,
            "2-way chance level should be 0.5 +- 0.02, got {acc}"
        );
    }

    #[test]
    fn fifty_way_retrieval_with_random_backend_sits_at_chance() {
        let backend = RandomEmbedder::new(13);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let trials = 10_000;
        let mut hits = 0;
        for t in 0..trials {
            let recon = random_clip(&mut rng, 1, 1, 1, &format!("r{t}"));
            let gt = random_clip(&mut rng, 1, 1, 1, &format!("g{t}"));
            let distractors: Vec<VideoClip> = (0..49)
                .map(|i| random_clip(&mut rng, 1, 1, 1, &format!("d{t}_{i}")))
                .collect();
            let refs: Vec<&VideoClip> = distractors.iter().collect();
            if nway_top1(&recon, &gt, &refs, &backend, EmbedMode::Video).unwrap() {
                hits += 1;
            }
        }
        let acc = hits as f64 / trials as f64;
        assert!(
            (acc - 0.02).abs() <= 0.005,
            "50-way chance level should be 0.02 +- 0.005, got {acc}"
        );
    }

    #[test]
    fn label_consistency_follows_backend_capability() {
        let stub = StubEmbedder::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clip = random_clip(&mut rng, 2, 6, 6, "a");
        let same = label_consistency(&clip, &clip, &stub, EmbedMode::Video).unwrap();
        assert_eq!(same, Some(true));
        // RandomEmbedder has no classifier, so the check is unavailable.
        let none = label_consistency(&clip, &clip, &RandomEmbedder::new(1), EmbedMode::Video).unwrap();
        assert_eq!(none, None);
    }

    #[test]
    fn vifi_matches_hand_computed_cosine() {
        let mut table = std::collections::HashMap::new();
        table.insert(
            "recon".to_string(),
            Array1::from_vec(vec![3.0 / 5.0, 4.0 / 5.0]),
        );
        table.insert(
            "gt".to_string(),
            Array1::from_vec(vec![4.0 / 5.0, 3.0 / 5.0]),
        );
        let backend = TableBackend { table };
        let frames = Array4::zeros((1, 2, 2, 3));
        let recon = clip_from(frames.clone(), "recon");
        let gt = clip_from(frames, "gt");
        let score = vifi_score(&recon, &gt, &backend).unwrap();
        assert_relative_eq!(score, 24.0 / 25.0, epsilon = 1e-12);
        assert_relative_eq!(score, 0.96, epsilon = 1e-12);
    }

    #[test]
    fn vifi_of_identical_clips_is_one() {
        let backend = StubEmbedder::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clip = random_clip(&mut rng, 3, 7, 7, "a");
        assert_relative_eq!(vifi_score(&clip, &clip, &backend).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn ssim_identity_inversion_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = Array3::from_shape_fn((16, 16, 3), |_| rng.gen::<f32>());
        let b = a.mapv(|v| 1.0 - v);
        assert_relative_eq!(ssim(a.view(), a.view()).unwrap(), 1.0, epsilon = 1e-9);
        let cross = ssim(a.view(), b.view()).unwrap();
        assert!(cross < 1.0, "inverted frame should not be structurally identical");
        assert_relative_eq!(cross, ssim(b.view(), a.view()).unwrap(), epsilon = 1e-12);
    }

    /// Direct windowed reference: same definition, structured independently
    /// (explicit per-window double loops, no separable filtering).
    fn ssim_reference(a: ArrayView3<f32>, b: ArrayView3<f32>) -> f64 {
        let ga = grayscale(a);
        let gb = grayscale(b);
        let (h, w) = ga.dim();
        let mut weights = [[0.0f64; SSIM_WINDOW]; SSIM_WINDOW];
        let mut total = 0.0;
        for (wy, row) in weights.iter_mut().enumerate() {
            for (wx, cell) in row.iter_mut().enumerate() {
                let dy = wy as f64 - 5.0;
                let dx = wx as f64 - 5.0;
                *cell = (-(dy * dy + dx * dx) / 4.5).exp();
                total += *cell;
            }
        }
        for row in weights.iter_mut() {
            for cell in row.iter_mut() {
                *cell /= total;
            }
        }
        let c1 = 0.0001;
        let c2 = 0.0009;
        let mut acc = 0.0;
        let mut count = 0.0;
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut ma, mut mb) = (0.0, 0.0);
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        ma += weights[wy][wx] * ga[[y0 + wy, x0 + wx]];
                        mb += weights[wy][wx] * gb[[y0 + wy, x0 + wx]];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let da = ga[[y0 + wy, x0 + wx]] - ma;
                        let db = gb[[y0 + wy, x0 + wx]] - mb;
                        va += weights[wy][wx] * da * da;
                        vb += weights[wy][wx] * db * db;
                        cov += weights[wy][wx] * da * db;
                    }
                }
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        acc / count
    }

    #[test]
    fn ssim_agrees_with_windowed_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for case in 0..3 {
            let h = 16 + case * 3;
            let a = Array3::from_shape_fn((h, 16, 3), |_| rng.gen::<f32>());
            let b = Array3::from_shape_fn((h, 16, 3), |(y, x, c)| {
                (a[[y, x, c]] * 0.7 + 0.1 + rng.gen::<f32>() * 0.2).min(1.0)
            });
            let fast = ssim(a.view(), b.view()).unwrap();
            let reference = ssim_reference(a.view(), b.view());
            assert_relative_eq!(fast, reference, epsilon = 1e-6);
        }
    }

    #[test]
    fn ssim_rejects_small_or_mismatched_frames() {
        let a = Array3::<f32>::zeros((8, 8, 3));
        assert_eq!(ssim(a.view(), a.view()).unwrap_err().exit_code(), 2);
        let b = Array3::<f32>::zeros((16, 16, 3));
        let c = Array3::<f32>::zeros((16, 12, 3));
        assert_eq!(ssim(b.view(), c.view()).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn psnr_matches_frozen_values() {
        let a = clip_from(Array4::from_elem((2, 4, 4, 3), 0.2f32), "a");
        let b = clip_from(Array4::from_elem((2, 4, 4, 3), 0.3f32), "b");
        // MSE = 0.01 exactly -> 10 * log10(100) = 20 dB.
        assert_relative_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
        let c = clip_from(Array4::from_elem((2, 4, 4, 3), 0.25f32), "c");
        let d = clip_from(Array4::from_elem((2, 4, 4, 3), 0.75f32), "d");
        // MSE = 0.25 -> 10 * log10(4).
        assert_relative_eq!(psnr(&c, &d).unwrap(), 6.020599913279624, epsilon = 1e-12);
        assert_relative_eq!(psnr(&d, &c).unwrap(), psnr(&c, &d).unwrap(), epsilon = 1e-12);
        assert!(psnr(&a, &a).unwrap().is_infinite());
    }

    #[test]
    fn hue_similarity_extremes() {
        let red = clip_from(
            Array4::from_shape_fn((1, 4, 4, 3), |(_, _, _, c)| if c == 0 { 1.0 } else { 0.0 }),
            "red",
        );
        let cyan = clip_from(
            Array4::from_shape_fn((1, 4, 4, 3), |(_, _, _, c)| if c == 0 { 0.0 } else { 1.0 }),
            "cyan",
        );
        let gray = clip_from(Array4::from_elem((1, 4, 4, 3), 0.5f32), "gray");
        assert_relative_eq!(hue_similarity(&red, &cyan).unwrap(), -1.0, epsilon = 1e-9);
        assert_relative_eq!(hue_similarity(&red, &red).unwrap(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(hue_similarity(&gray, &red).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(hue_similarity(&gray, &gray).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn clip_pcc_identical_frames_score_one_when_gate_passes() {
        let backend = StubEmbedder::new(4);
        let frame = Array3::from_shape_fn((6, 6, 3), |(y, x, c)| {
            (y as f32 * 7.0 + x as f32 * 3.0 + c as f32) / 50.0
        });
        let mut frames = Array4::zeros((3, 6, 6, 3));
        for i in 0..3 {
            frames.index_axis_mut(ndarray::Axis(0), i).assign(&frame);
        }
        let clip = clip_from(frames, "a");
        assert_relative_eq!(clip_pcc(&clip, &backend, 0.9).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn clip_pcc_gate_is_a_hard_threshold() {
        let backend = StubEmbedder::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let clip = random_clip(&mut rng, 3, 6, 6, "a");
        let above = clip_pcc(&clip, &backend, CLIP_PCC_GATE + 0.001).unwrap();
        let below = clip_pcc(&clip, &backend, CLIP_PCC_GATE - 0.001).unwrap();
        assert!(above != 0.0, "ungated value should be nonzero for this clip");
        assert_eq!(below, 0.0);
        // The jump across the gate equals the full ungated value.
        assert_relative_eq!(above - below, above, epsilon = 1e-12);
        assert_relative_eq!(clip_pcc(&clip, &backend, CLIP_PCC_GATE).unwrap(), above, epsilon = 1e-12);
    }

    #[test]
    fn clip_pcc_needs_two_frames() {
        let backend = StubEmbedder::new(4);
        let clip = clip_from(Array4::from_elem((1, 4, 4, 3), 0.5f32), "a");
        assert_eq!(clip_pcc(&clip, &backend, 0.9).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn resampling_aligns_frame_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clip = random_clip(&mut rng, 3, 4, 4, "a");
        let up = resample_frames(&clip, 5).unwrap();
        assert_eq!(up.n_frames(), 5);
        // Endpoints map to endpoints.
        assert_eq!(
            up.frames.index_axis(ndarray::Axis(0), 0),
            clip.frames.index_axis(ndarray::Axis(0), 0)
        );
        assert_eq!(
            up.frames.index_axis(ndarray::Axis(0), 4),
            clip.frames.index_axis(ndarray::Axis(0), 2)
        );
        let same = resample_frames(&clip, 3).unwrap();
        assert_eq!(same.frames, clip.frames);
        assert_eq!(resample_frames(&clip, 0).unwrap_err().exit_code(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn ssim_stays_in_range_and_is_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array3::from_shape_fn((12, 12, 3), |_| rng.gen::<f32>());
            let b = Array3::from_shape_fn((12, 12, 3), |_| rng.gen::<f32>());
            let s = ssim(a.view(), b.view()).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            let t = ssim(b.view(), a.view()).unwrap();
            prop_assert!((s - t).abs() < 1e-12);
        }

        #[test]
        fn hue_similarity_stays_in_range(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_clip(&mut rng, 2, 5, 5, "a");
            let b = random_clip(&mut rng, 2, 5, 5, "b");
            let h = hue_similarity(&a, &b).unwrap();
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&h));
        }
    }
}
