//! fMRI → spatiotemporal motion latents.
//!
//! A per-subject MLP projects the scan onto `n` coarse frame embeddings
//! (`n × c × g × g`). Three attention branches then specialize: one attends
//! over spatial positions within each frame, one over the frame axis at each
//! channel-location independently, and one cross-attends the frame stream to
//! the predicted motion-caption embedding. The branches are fused with two
//! learnable scalar weights and decoded by a small convolutional upsampling
//! stack into per-frame video latents (`n × 4 × 28 × 28` at full scale).
//!
//! Training pairs an L1 reconstruction term with a symmetric InfoNCE term
//! over frames so that predicted and reference latents agree both pointwise
//! and contrastively; see [`mad_loss`].

mod train;

pub use train::{
    load_motion_checkpoint, load_motion_curves, load_motion_dataset, save_motion_checkpoint,
    save_motion_curves, train_motion, MotionCheckpointHeader, MotionDataset, MotionEpochLoss,
    MotionSample, MotionTrainConfig, MotionTrainedModel, MOTION_CURVES_HEADER,
};

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_grad, AttentionCache, Conv2d, Conv2dCache, MlpCache, Mlp, MultiHeadAttention,
    Parameterized, Upsample2d,
};
use crate::tensor;

/// Head layout for one attention branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionConfig {
    fn validate(&self, what: &str) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Validation(format!(
                "{what} attention needs at least one head and a positive head width"
            )));
        }
        Ok(())
    }
}

/// Shapes and widths of the motion decoder.
///
/// The default matches the published model: 6 frames of 64×7×7 embeddings,
/// a five-layer projection MLP (256, 6·4096, 6·4096, 4096, 6·64·7·7 wide),
/// and a decoder that upsamples 7→14→28 into 4-channel latents. Attention
/// branches default to a single head as wide as the stream they read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotionModelConfig {
    /// Frames `n` decoded per clip.
    pub frames: usize,
    /// Channels `c` of the coarse per-frame embedding.
    pub embed_channels: usize,
    /// Side length `g` of the coarse embedding grid.
    pub embed_grid: usize,
    /// Channels of the output video latent.
    pub out_channels: usize,
    /// Per-block nearest-neighbor upsampling factors (three up blocks).
    pub up_factors: [usize; 3],
    /// Channel widths after the first and second up blocks.
    pub decoder_channels: [usize; 2],
    /// Hidden widths of the projection MLP (the final `n·c·g·g` layer is
    /// appended automatically).
    pub proj_channels: Vec<usize>,
    /// Shape of the conditioning embedding (tokens × width).
    pub sem_tokens: usize,
    pub sem_width: usize,
    pub spatial: AttentionConfig,
    pub temporal: AttentionConfig,
    pub cross: AttentionConfig,
}

impl Default for MotionModelConfig {
    fn default() -> Self {
        MotionModelConfig {
            frames: 6,
            embed_channels: 64,
            embed_grid: 7,
            out_channels: 4,
            up_factors: [2, 2, 1],
            decoder_channels: [32, 16],
            proj_channels: vec![256, 6 * 4096, 6 * 4096, 4096],
            sem_tokens: 77,
            sem_width: 768,
            spatial: AttentionConfig { heads: 1, head_dim: 64 },
            temporal: AttentionConfig { heads: 1, head_dim: 1 },
            cross: AttentionConfig { heads: 1, head_dim: 64 * 7 * 7 },
        }
    }
}

impl MotionModelConfig {
    /// Side length of the decoded latent (`g` times the product of the
    /// upsampling factors).
    pub fn out_grid(&self) -> usize {
        self.embed_grid * self.up_factors.iter().product::<usize>()
    }

    /// Scalars in one frame's coarse embedding (`c·g·g`).
    pub fn embed_volume(&self) -> usize {
        self.embed_channels * self.embed_grid * self.embed_grid
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(usize, &str); 6] = [
            (self.frames, "frames"),
            (self.embed_channels, "embed_channels"),
            (self.embed_grid, "embed_grid"),
            (self.out_channels, "out_channels"),
            (self.sem_tokens, "sem_tokens"),
            (self.sem_width, "sem_width"),
        ];
        for (v, name) in positive {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.up_factors.iter().any(|&f| f == 0) {
            return Err(Error::Validation("upsampling factors must be positive".into()));
        }
        if self.decoder_channels.iter().any(|&c| c == 0) {
            return Err(Error::Validation("decoder channels must be positive".into()));
        }
        if self.proj_channels.iter().any(|&c| c == 0) {
            return Err(Error::Validation("projection widths must be positive".into()));
        }
        self.spatial.validate("spatial")?;
        self.temporal.validate("temporal")?;
        self.cross.validate("cross")
    }
}

/// Decoded (or reference) per-frame video latents for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionLatentSeq {
    pub clip_id: String,
    /// `[n, c, h, w]`.
    pub latents: Array4<f64>,
}

impl MotionLatentSeq {
    pub fn validate(&self) -> Result<()> {
        let (n, c, h, w) = self.latents.dim();
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Validation(format!(
                "latent sequence for clip {} has an empty axis",
                self.clip_id
            )));
        }
        if self.latents.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "latent sequence for clip {} contains non-finite values",
                self.clip_id
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let (n, c, h, w) = self.latents.dim();
        let data: Vec<f32> = self.latents.iter().map(|&v| v as f32).collect();
        let t = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), data)
            .expect("shape matches data length");
        tensor::write_tensor(path, &t)
    }

    pub fn load(path: &Path, clip_id: &str) -> Result<Self> {
        let t = tensor::read_tensor(path)?;
        if t.ndim() != 4 {
            return Err(Error::Validation(format!(
                "{}: expected a rank-4 latent sequence, got rank {}",
                path.display(),
                t.ndim()
            )));
        }
        let shape = t.shape().to_vec();
        let latents = Array4::from_shape_vec(
            (shape[0], shape[1], shape[2], shape[3]),
            t.iter().map(|&v| v as f64).collect(),
        )
        .expect("shape matches data length");
        let seq = MotionLatentSeq {
            clip_id: clip_id.to_string(),
            latents,
        };
        seq.validate()?;
        Ok(seq)
    }
}

// ---------------------------------------------------------------------------
// Attention plumbing shared by the branches and the decoder.

/// Self-attention over the spatial positions of each frame independently:
/// frame `[c, h, w]` becomes `h·w` tokens of width `c`.
fn attend_frames(
    attn: &MultiHeadAttention,
    x: &Array4<f64>,
) -> (Array4<f64>, Vec<AttentionCache>) {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, h, w));
    let mut caches = Vec::with_capacity(n);
    for i in 0..n {
        let rows =
            Array2::from_shape_fn((h * w, c), |(p, ch)| x[[i, ch, p / w, p % w]]);
        let (out, cache) = attn.forward(&rows, &rows);
        for p in 0..h * w {
            for ch in 0..c {
                y[[i, ch, p / w, p % w]] = out[[p, ch]];
            }
        }
        caches.push(cache);
    }
    (y, caches)
}

fn attend_frames_backward(
    attn: &MultiHeadAttention,
    caches: &[AttentionCache],
    dy: &Array4<f64>,
    grad: &mut MultiHeadAttention,
) -> Array4<f64> {
    let (n, c, h, w) = dy.dim();
    let mut dx = Array4::zeros((n, c, h, w));
    for i in 0..n {
        let drows =
            Array2::from_shape_fn((h * w, c), |(p, ch)| dy[[i, ch, p / w, p % w]]);
        let (da, db) = attn.backward(&caches[i], &drows, grad);
        let dsum = da + db;
        for p in 0..h * w {
            for ch in 0..c {
                dx[[i, ch, p / w, p % w]] = dsum[[p, ch]];
            }
        }
    }
    dx
}

/// Self-attention over the frame axis, independently at every
/// channel-location: each `(c, y, x)` yields `n` tokens of width 1, so
/// mixing happens only along time.
fn attend_over_time(
    attn: &MultiHeadAttention,
    x: &Array4<f64>,
) -> (Array4<f64>, Vec<AttentionCache>) {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, h, w));
    let mut caches = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let rows = Array2::from_shape_fn((n, 1), |(i, _)| x[[i, ch, yy, xx]]);
                let (out, cache) = attn.forward(&rows, &rows);
                for i in 0..n {
                    y[[i, ch, yy, xx]] = out[[i, 0]];
                }
                caches.push(cache);
            }
        }
    }
    (y, caches)
}

fn attend_over_time_backward(
    attn: &MultiHeadAttention,
    caches: &[AttentionCache],
    dy: &Array4<f64>,
    grad: &mut MultiHeadAttention,
) -> Array4<f64> {
    let (n, c, h, w) = dy.dim();
    let mut dx = Array4::zeros((n, c, h, w));
    let mut it = caches.iter();
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let cache = it.next().expect("one cache per channel-location");
                let drows = Array2::from_shape_fn((n, 1), |(i, _)| dy[[i, ch, yy, xx]]);
                let (da, db) = attn.backward(cache, &drows, grad);
                for i in 0..n {
                    dx[[i, ch, yy, xx]] = da[[i, 0]] + db[[i, 0]];
                }
            }
        }
    }
    dx
}

fn frames_to_rows(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let v = c * h * w;
    Array2::from_shape_fn((n, v), |(i, idx)| {
        let ch = idx / (h * w);
        let rem = idx % (h * w);
        x[[i, ch, rem / w, rem % w]]
    })
}

fn rows_to_frames(rows: &Array2<f64>, c: usize, h: usize, w: usize) -> Array4<f64> {
    let n = rows.nrows();
    Array4::from_shape_fn((n, c, h, w), |(i, ch, yy, xx)| {
        rows[[i, ch * h * w + yy * w + xx]]
    })
}

// ---------------------------------------------------------------------------
// Convolutional upsampling decoder.

/// One upsampling stage: position self-attention (residual), a 3×3 conv to
/// the next channel width, GELU (skipped on the last stage so latents stay
/// unbounded), then nearest-neighbor upsampling.
#[derive(Debug, Clone)]
struct UpBlock {
    attn: MultiHeadAttention,
    conv: Conv2d,
    up: Upsample2d,
    last: bool,
}

struct UpBlockCache {
    attn: Vec<AttentionCache>,
    conv: Conv2dCache,
    pre_act: Array4<f64>,
}

impl UpBlock {
    fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, UpBlockCache) {
        let (a, attn_caches) = attend_frames(&self.attn, x);
        let mixed = x + &a;
        let (pre, conv_cache) = self.conv.forward(&mixed);
        let act = if self.last {
            pre.clone()
        } else {
            pre.mapv(gelu)
        };
        let y = self.up.forward(&act);
        (
            y,
            UpBlockCache {
                attn: attn_caches,
                conv: conv_cache,
                pre_act: pre,
            },
        )
    }

    fn backward(&self, cache: &UpBlockCache, dy: &Array4<f64>, grad: &mut UpBlock) -> Array4<f64> {
        let dact = self.up.backward(dy);
        let dpre = if self.last {
            dact
        } else {
            &dact * &cache.pre_act.mapv(gelu_grad)
        };
        let dmixed = self.conv.backward(&cache.conv, &dpre, &mut grad.conv);
        let dattn = attend_frames_backward(&self.attn, &cache.attn, &dmixed, &mut grad.attn);
        dmixed + dattn
    }

    fn zeros_like(&self) -> UpBlock {
        UpBlock {
            attn: self.attn.zeros_like(),
            conv: self.conv.zeros_like(),
            up: self.up.clone(),
            last: self.last,
        }
    }
}

/// Mid block (conv → GELU → residual position attention → conv → GELU)
/// followed by three [`UpBlock`]s.
#[derive(Debug, Clone)]
pub struct LatentDecoder {
    mid_in: Conv2d,
    mid_attn: MultiHeadAttention,
    mid_out: Conv2d,
    blocks: Vec<UpBlock>,
}

pub struct LatentDecoderCache {
    mid_in: Conv2dCache,
    mid_pre1: Array4<f64>,
    mid_attn: Vec<AttentionCache>,
    mid_out: Conv2dCache,
    mid_pre2: Array4<f64>,
    blocks: Vec<UpBlockCache>,
}

impl LatentDecoder {
    fn new(config: &MotionModelConfig, rng: &mut impl Rng) -> Self {
        let c = config.embed_channels;
        let plan = [
            c,
            config.decoder_channels[0],
            config.decoder_channels[1],
            config.out_channels,
        ];
        let mid_in = Conv2d::new(c, c, 3, rng);
        let mid_attn = MultiHeadAttention::new(c, c, c, 1, c, false, rng);
        let mid_out = Conv2d::new(c, c, 3, rng);
        let blocks = (0..3)
            .map(|i| UpBlock {
                attn: MultiHeadAttention::new(plan[i], plan[i], plan[i], 1, plan[i], false, rng),
                conv: Conv2d::new(plan[i], plan[i + 1], 3, rng),
                up: Upsample2d {
                    factor: config.up_factors[i],
                },
                last: i == 2,
            })
            .collect();
        LatentDecoder {
            mid_in,
            mid_attn,
            mid_out,
            blocks,
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, LatentDecoderCache) {
        let (pre1, mid_in_cache) = self.mid_in.forward(x);
        let a1 = pre1.mapv(gelu);
        let (attn_out, mid_attn_cache) = attend_frames(&self.mid_attn, &a1);
        let mixed = &a1 + &attn_out;
        let (pre2, mid_out_cache) = self.mid_out.forward(&mixed);
        let mut h = pre2.mapv(gelu);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(&h);
            blocks.push(cache);
            h = next;
        }
        (
            h,
            LatentDecoderCache {
                mid_in: mid_in_cache,
                mid_pre1: pre1,
                mid_attn: mid_attn_cache,
                mid_out: mid_out_cache,
                mid_pre2: pre2,
                blocks,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &LatentDecoderCache,
        dy: &Array4<f64>,
        grad: &mut LatentDecoder,
    ) -> Array4<f64> {
        let mut d = dy.clone();
        for ((b, c), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(&mut grad.blocks)
            .rev()
        {
            d = b.backward(c, &d, g);
        }
        let dpre2 = &d * &cache.mid_pre2.mapv(gelu_grad);
        let dmixed = self.mid_out.backward(&cache.mid_out, &dpre2, &mut grad.mid_out);
        let da1_attn = attend_frames_backward(
            &self.mid_attn,
            &cache.mid_attn,
            &dmixed,
            &mut grad.mid_attn,
        );
        let da1 = &dmixed + &da1_attn;
        let dpre1 = &da1 * &cache.mid_pre1.mapv(gelu_grad);
        self.mid_in.backward(&cache.mid_in, &dpre1, &mut grad.mid_in)
    }

    pub fn zeros_like(&self) -> LatentDecoder {
        LatentDecoder {
            mid_in: self.mid_in.zeros_like(),
            mid_attn: self.mid_attn.zeros_like(),
            mid_out: self.mid_out.zeros_like(),
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
        }
    }
}

impl Parameterized for LatentDecoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.mid_in.visit(&mut |n, s| f(&format!("mid_in.{n}"), s));
        self.mid_attn.visit(&mut |n, s| f(&format!("mid_attn.{n}"), s));
        self.mid_out.visit(&mut |n, s| f(&format!("mid_out.{n}"), s));
        for (i, b) in self.blocks.iter().enumerate() {
            b.attn.visit(&mut |n, s| f(&format!("up{i}.attn.{n}"), s));
            b.conv.visit(&mut |n, s| f(&format!("up{i}.conv.{n}"), s));
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.mid_in.visit_mut(&mut |n, s| f(&format!("mid_in.{n}"), s));
        self.mid_attn.visit_mut(&mut |n, s| f(&format!("mid_attn.{n}"), s));
        self.mid_out.visit_mut(&mut |n, s| f(&format!("mid_out.{n}"), s));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.attn.visit_mut(&mut |n, s| f(&format!("up{i}.attn.{n}"), s));
            b.conv.visit_mut(&mut |n, s| f(&format!("up{i}.conv.{n}"), s));
        }
    }
}

// ---------------------------------------------------------------------------
// The motion decoder itself.

/// Per-subject projection, three attention branches, learnable fusion, and
/// the convolutional decoder.
#[derive(Debug, Clone)]
pub struct MotionDecoder {
    pub config: MotionModelConfig,
    projectors: BTreeMap<String, Mlp>,
    spatial: MultiHeadAttention,
    temporal: MultiHeadAttention,
    cross: MultiHeadAttention,
    /// Fusion weights for the spatial and temporal branches (the cross
    /// branch is the unweighted carrier). Learned along with everything
    /// else; initialized to 1.
    pub lambda_spatial: f64,
    pub lambda_temporal: f64,
    pub decoder: LatentDecoder,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct MotionForwardCache {
    subject: String,
    proj: MlpCache,
    s: Array4<f64>,
    spat: Vec<AttentionCache>,
    e_spat: Array4<f64>,
    temp: Vec<AttentionCache>,
    e_temp: Array4<f64>,
    cross: AttentionCache,
    dec: LatentDecoderCache,
}

impl MotionDecoder {
    /// `subject_dims` maps subject id → processed fMRI width. Weights are
    /// drawn per subject in sorted-id order, then the branches, then the
    /// decoder, so a fixed seed gives a fixed model.
    pub fn new(
        subject_dims: &BTreeMap<String, usize>,
        config: MotionModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if subject_dims.is_empty() {
            return Err(Error::Validation("at least one subject is required".into()));
        }
        let out_len = config.frames * config.embed_volume();
        let mut projectors = BTreeMap::new();
        for (subject, &dim) in subject_dims {
            if dim == 0 {
                return Err(Error::Validation(format!(
                    "subject {subject} has zero voxels"
                )));
            }
            let mut dims = vec![dim];
            dims.extend(&config.proj_channels);
            dims.push(out_len);
            projectors.insert(subject.clone(), Mlp::new(&dims, rng));
        }
        let c = config.embed_channels;
        let v = config.embed_volume();
        let spatial =
            MultiHeadAttention::new(c, c, c, config.spatial.heads, config.spatial.head_dim, false, rng);
        let temporal = MultiHeadAttention::new(
            1,
            1,
            1,
            config.temporal.heads,
            config.temporal.head_dim,
            false,
            rng,
        );
        let cross = MultiHeadAttention::new(
            v,
            config.sem_width,
            v,
            config.cross.heads,
            config.cross.head_dim,
            false,
            rng,
        );
        let decoder = LatentDecoder::new(&config, rng);
        Ok(MotionDecoder {
            config,
            projectors,
            spatial,
            temporal,
            cross,
            lambda_spatial: 1.0,
            lambda_temporal: 1.0,
            decoder,
        })
    }

    pub fn subjects(&self) -> Vec<&str> {
        self.projectors.keys().map(|s| s.as_str()).collect()
    }

    /// Processed fMRI width expected for `subject`.
    pub fn subject_dim(&self, subject: &str) -> Result<usize> {
        let mlp = self.projectors.get(subject).ok_or_else(|| {
            Error::Validation(format!("no projection trained for subject {subject:?}"))
        })?;
        Ok(mlp.layers[0].w.nrows())
    }

    /// Project a scan onto the coarse frame embeddings `S ∈ n×c×g×g`.
    pub fn project(&self, subject: &str, x: &Array1<f64>) -> Result<Array4<f64>> {
        let (s, _) = self.project_cached(subject, x)?;
        Ok(s)
    }

    fn project_cached(
        &self,
        subject: &str,
        x: &Array1<f64>,
    ) -> Result<(Array4<f64>, MlpCache)> {
        let dim = self.subject_dim(subject)?;
        if x.len() != dim {
            return Err(Error::Validation(format!(
                "subject {subject} expects {dim} voxels, got {}",
                x.len()
            )));
        }
        let mlp = &self.projectors[subject];
        let x_row = x.clone().insert_axis(ndarray::Axis(0));
        let (out, cache) = mlp.forward(&x_row);
        let cfg = &self.config;
        let g = cfg.embed_grid;
        let s = Array4::from_shape_fn(
            (cfg.frames, cfg.embed_channels, g, g),
            |(i, ch, yy, xx)| out[[0, i * cfg.embed_volume() + ch * g * g + yy * g + xx]],
        );
        Ok((s, cache))
    }

    /// Spatial branch: position self-attention within each frame.
    pub fn spatial_attention(&self, s: &Array4<f64>) -> Array4<f64> {
        attend_frames(&self.spatial, s).0
    }

    /// Temporal branch: frame self-attention at each channel-location.
    pub fn temporal_attention(&self, e: &Array4<f64>) -> Array4<f64> {
        attend_over_time(&self.temporal, e).0
    }

    /// Cross branch: each frame (flattened to one token) attends over the
    /// conditioning embedding's tokens.
    pub fn cross_attention(&self, e: &Array4<f64>, sem: &Array2<f64>) -> Result<Array4<f64>> {
        self.check_sem(sem)?;
        let (_, c, h, w) = e.dim();
        let rows = frames_to_rows(e);
        let (out, _) = self.cross.forward(&rows, sem);
        Ok(rows_to_frames(&out, c, h, w))
    }

    fn check_sem(&self, sem: &Array2<f64>) -> Result<()> {
        let want = (self.config.sem_tokens, self.config.sem_width);
        if sem.dim() != want {
            return Err(Error::Validation(format!(
                "conditioning embedding is {:?}, model expects {:?}",
                sem.dim(),
                want
            )));
        }
        Ok(())
    }

    /// Full forward pass: scan + conditioning embedding → per-frame latents
    /// `[n, out_channels, out_grid, out_grid]`.
    pub fn forward(
        &self,
        subject: &str,
        x: &Array1<f64>,
        sem: &Array2<f64>,
    ) -> Result<(Array4<f64>, MotionForwardCache)> {
        self.check_sem(sem)?;
        let (s, proj_cache) = self.project_cached(subject, x)?;
        let (e_spat, spat_caches) = attend_frames(&self.spatial, &s);
        let (e_temp, temp_caches) = attend_over_time(&self.temporal, &e_spat);
        let (_, c, h, w) = s.dim();
        let q_rows = frames_to_rows(&e_temp);
        let (cross_rows, cross_cache) = self.cross.forward(&q_rows, sem);
        let e_cross = rows_to_frames(&cross_rows, c, h, w);
        let fused =
            &(&e_spat * self.lambda_spatial) + &(&e_temp * self.lambda_temporal) + &e_cross;
        let (latents, dec_cache) = self.decoder.forward(&fused);
        Ok((
            latents,
            MotionForwardCache {
                subject: subject.to_string(),
                proj: proj_cache,
                s,
                spat: spat_caches,
                e_spat,
                temp: temp_caches,
                e_temp,
                cross: cross_cache,
                dec: dec_cache,
            },
        ))
    }

    /// Accumulate parameter gradients for `d(loss)/d(latents)` into `grad`.
    pub fn backward(
        &self,
        cache: &MotionForwardCache,
        dlatents: &Array4<f64>,
        grad: &mut MotionDecoder,
    ) {
        let dfused = self.decoder.backward(&cache.dec, dlatents, &mut grad.decoder);
        grad.lambda_spatial += (&dfused * &cache.e_spat).sum();
        grad.lambda_temporal += (&dfused * &cache.e_temp).sum();

        let (_, c, h, w) = cache.s.dim();
        let dcross_rows = frames_to_rows(&dfused);
        let (dq_rows, _dsem) = self.cross.backward(&cache.cross, &dcross_rows, &mut grad.cross);
        let de_temp = &(&dfused * self.lambda_temporal) + &rows_to_frames(&dq_rows, c, h, w);

        let dtemp_in =
            attend_over_time_backward(&self.temporal, &cache.temp, &de_temp, &mut grad.temporal);
        let de_spat = &(&dfused * self.lambda_spatial) + &dtemp_in;

        let ds = attend_frames_backward(&self.spatial, &cache.spat, &de_spat, &mut grad.spatial);

        let cfg = &self.config;
        let g = cfg.embed_grid;
        let mut dproj_out = Array2::zeros((1, cfg.frames * cfg.embed_volume()));
        for i in 0..cfg.frames {
            for ch in 0..cfg.embed_channels {
                for yy in 0..g {
                    for xx in 0..g {
                        dproj_out[[0, i * cfg.embed_volume() + ch * g * g + yy * g + xx]] =
                            ds[[i, ch, yy, xx]];
                    }
                }
            }
        }
        let mlp = &self.projectors[&cache.subject];
        let gproj = grad
            .projectors
            .get_mut(&cache.subject)
            .expect("grad model mirrors the trained model");
        let _ = mlp.backward(&cache.proj, &dproj_out, gproj);
    }

    /// Decode one clip into a [`MotionLatentSeq`].
    pub fn predict(
        &self,
        subject: &str,
        x: &Array1<f64>,
        sem: &Array2<f64>,
        clip_id: &str,
    ) -> Result<MotionLatentSeq> {
        let (latents, _) = self.forward(subject, x, sem)?;
        Ok(MotionLatentSeq {
            clip_id: clip_id.to_string(),
            latents,
        })
    }

    pub fn zeros_like(&self) -> MotionDecoder {
        MotionDecoder {
            config: self.config.clone(),
            projectors: self
                .projectors
                .iter()
                .map(|(s, m)| (s.clone(), m.zeros_like()))
                .collect(),
            spatial: self.spatial.zeros_like(),
            temporal: self.temporal.zeros_like(),
            cross: self.cross.zeros_like(),
            lambda_spatial: 0.0,
            lambda_temporal: 0.0,
            decoder: self.decoder.zeros_like(),
        }
    }

    /// Access to the per-branch attention weights (tests pin these down).
    pub fn branches_mut(
        &mut self,
    ) -> (
        &mut MultiHeadAttention,
        &mut MultiHeadAttention,
        &mut MultiHeadAttention,
    ) {
        (&mut self.spatial, &mut self.temporal, &mut self.cross)
    }
}

impl Parameterized for MotionDecoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (s, m) in &self.projectors {
            m.visit(&mut |n, sl| f(&format!("projector.{s}.{n}"), sl));
        }
        self.spatial.visit(&mut |n, sl| f(&format!("spatial.{n}"), sl));
        self.temporal.visit(&mut |n, sl| f(&format!("temporal.{n}"), sl));
        self.cross.visit(&mut |n, sl| f(&format!("cross.{n}"), sl));
        f("lambda_spatial", std::slice::from_ref(&self.lambda_spatial));
        f("lambda_temporal", std::slice::from_ref(&self.lambda_temporal));
        self.decoder.visit(&mut |n, sl| f(&format!("decoder.{n}"), sl));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (s, m) in &mut self.projectors {
            m.visit_mut(&mut |n, sl| f(&format!("projector.{s}.{n}"), sl));
        }
        self.spatial.visit_mut(&mut |n, sl| f(&format!("spatial.{n}"), sl));
        self.temporal.visit_mut(&mut |n, sl| f(&format!("temporal.{n}"), sl));
        self.cross.visit_mut(&mut |n, sl| f(&format!("cross.{n}"), sl));
        f(
            "lambda_spatial",
            std::slice::from_mut(&mut self.lambda_spatial),
        );
        f(
            "lambda_temporal",
            std::slice::from_mut(&mut self.lambda_temporal),
        );
        self.decoder.visit_mut(&mut |n, sl| f(&format!("decoder.{n}"), sl));
    }
}

// ---------------------------------------------------------------------------
// Loss.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionLossBreakdown {
    /// Mean absolute error, averaged per frame then over frames.
    pub l1: f64,
    /// Symmetric frame-matching InfoNCE (cosine similarities, temperature
    /// `tau`); zero when fewer than two frames.
    pub contrastive: f64,
    pub total: f64,
}

/// Reconstruction + symmetric contrastive loss between a predicted and a
/// reference latent sequence of the same shape.
pub fn mad_loss(
    pred: &Array4<f64>,
    target: &Array4<f64>,
    tau: f64,
) -> Result<MotionLossBreakdown> {
    mad_loss_and_grad(pred, target, tau).map(|(b, _)| b)
}

pub(crate) fn mad_loss_and_grad(
    pred: &Array4<f64>,
    target: &Array4<f64>,
    tau: f64,
) -> Result<(MotionLossBreakdown, Array4<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::Validation(format!(
            "latent shapes differ: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Validation("temperature must be positive".into()));
    }
    let (n, c, h, w) = pred.dim();
    if n == 0 || c * h * w == 0 {
        return Err(Error::Validation("latent sequences must be non-empty".into()));
    }
    let total_elems = (n * c * h * w) as f64;

    let diff = pred - target;
    let l1 = diff.mapv(f64::abs).sum() / total_elems;
    let mut dpred = diff.mapv(|v| v.signum() / total_elems);

    let mut contrastive = 0.0;
    if n >= 2 {
        let v = c * h * w;
        let p_rows = frames_to_rows(pred);
        let t_rows = frames_to_rows(target);
        let norm_of = |rows: &Array2<f64>, i: usize| -> f64 {
            rows.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()
        };
        let mut u = Array2::zeros((n, v));
        let mut wn = Array2::zeros((n, v));
        let mut p_norms = vec![0.0; n];
        for i in 0..n {
            let pn = norm_of(&p_rows, i);
            p_norms[i] = pn;
            if pn > 1e-12 {
                u.row_mut(i).assign(&(&p_rows.row(i) / pn));
            }
            let tn = norm_of(&t_rows, i);
            if tn > 1e-12 {
                wn.row_mut(i).assign(&(&t_rows.row(i) / tn));
            }
        }
        let sim = u.dot(&wn.t());

        let scale = 1.0 / (2.0 * n as f64);
        let mut dsim = Array2::zeros((n, n));
        // Predicted frames as anchors over reference candidates…
        for i in 0..n {
            let logits: Vec<f64> = (0..n).map(|k| sim[[i, k]] / tau).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            contrastive += scale * (z.ln() + max - logits[i]);
            for k in 0..n {
                let p = exp[k] / z;
                dsim[[i, k]] += scale * (p - if k == i { 1.0 } else { 0.0 }) / tau;
            }
        }
        // …and reference frames as anchors over predicted candidates.
        for j in 0..n {
            let logits: Vec<f64> = (0..n).map(|k| sim[[k, j]] / tau).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            contrastive += scale * (z.ln() + max - logits[j]);
            for k in 0..n {
                let p = exp[k] / z;
                dsim[[k, j]] += scale * (p - if k == j { 1.0 } else { 0.0 }) / tau;
            }
        }

        let du = dsim.dot(&wn);
        let mut dp_rows = Array2::zeros((n, v));
        for i in 0..n {
            if p_norms[i] <= 1e-12 {
                continue;
            }
            let ui = u.row(i);
            let dui = du.row(i);
            let inner: f64 = dui.dot(&ui);
            let drow = (&dui - &(&ui * inner)) / p_norms[i];
            dp_rows.row_mut(i).assign(&drow);
        }
        dpred = dpred + rows_to_frames(&dp_rows, c, h, w);
    }

    let breakdown = MotionLossBreakdown {
        l1,
        contrastive,
        total: l1 + contrastive,
    };
    Ok((breakdown, dpred))
}
