//! Seeded synthetic dataset generation.
//!
//! The fixture is built so every downstream stage is solvable by design:
//!
//! * each clip has a low-dimensional ground-truth code;
//! * semantic targets are fixed random linear maps of the code;
//! * the video is a translating periodic texture whose pattern and velocity
//!   are deterministic functions of the code (monotonic motion, so
//!   frame-order tests have a well-defined optimum);
//! * per-frame motion latents are average-pooled, zero-centered video
//!   channels (a stand-in for a video VAE's encoder);
//! * each subject's raw fMRI series embeds the code *and* the flattened
//!   motion latents through fixed random linear maps on its signal voxels
//!   plus Gaussian noise, with extra pure noise voxels and lag rows
//!   prepended, so voxel selection and lag correction have real work to do.
//!
//! Because the semantic targets are themselves linear in the code, every
//! training target is reachable from the voxel vectors by a linear read-out,
//! which is what makes the overfit checks on this dataset well-posed.
//!
//! Everything is drawn from one ChaCha8 stream in a fixed order, making the
//! emitted tree byte-identical for a given seed and config.

use std::path::Path;

use ndarray::{Array2, Array4, ArrayD, IxDyn};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::tensor;

use crate::data::EMBEDDING_LEVELS as LEVELS;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub n_subjects: usize,
    pub n_clips: usize,
    pub train_clips: usize,
    pub frames: usize,
    pub video_h: usize,
    pub video_w: usize,
    /// CLIP-style target shape (tokens × embed_dim).
    pub tokens: usize,
    pub embed_dim: usize,
    /// Per-frame motion latent shape.
    pub latent_c: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    /// Signal voxels for subject i: `base_signal_voxels + i·signal_voxel_step`.
    pub base_signal_voxels: usize,
    pub signal_voxel_step: usize,
    /// Extra voxels carrying pure noise (never stimulus-driven).
    pub noise_voxels: usize,
    /// Ground-truth code width.
    pub code_dim: usize,
    /// Std of the measurement noise added to signal voxels.
    pub noise_sigma: f64,
    pub tr_seconds: f64,
    pub lag_seconds: f64,
}

impl Default for FixtureConfig {
    /// Published shapes (77×768 targets, 4×28×28 latents, 6 frames) at a
    /// desk-scale clip and voxel count.
    fn default() -> Self {
        FixtureConfig {
            n_subjects: 3,
            n_clips: 40,
            train_clips: 32,
            frames: 6,
            video_h: 56,
            video_w: 56,
            tokens: 77,
            embed_dim: 768,
            latent_c: 4,
            latent_h: 28,
            latent_w: 28,
            base_signal_voxels: 900,
            signal_voxel_step: 100,
            noise_voxels: 300,
            code_dim: 16,
            noise_sigma: 0.05,
            tr_seconds: 2.0,
            lag_seconds: 4.0,
        }
    }
}

impl FixtureConfig {
    /// Downsized variant for fast tests: small embeddings and voxel counts,
    /// same structure.
    pub fn small() -> Self {
        FixtureConfig {
            tokens: 8,
            embed_dim: 16,
            base_signal_voxels: 60,
            signal_voxel_step: 10,
            noise_voxels: 40,
            video_h: 28,
            video_w: 28,
            latent_h: 14,
            latent_w: 14,
            ..FixtureConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("n_subjects", self.n_subjects),
            ("n_clips", self.n_clips),
            ("train_clips", self.train_clips),
            ("frames", self.frames),
            ("video_h", self.video_h),
            ("video_w", self.video_w),
            ("tokens", self.tokens),
            ("embed_dim", self.embed_dim),
            ("latent_c", self.latent_c),
            ("latent_h", self.latent_h),
            ("latent_w", self.latent_w),
            ("base_signal_voxels", self.base_signal_voxels),
            ("code_dim", self.code_dim),
        ];
        for (name, v) in positives {
            if v < 1 {
                return Err(Error::Config(format!("fixture {name} must be ≥ 1")));
            }
        }
        if self.train_clips > self.n_clips {
            return Err(Error::Config(format!(
                "train_clips {} exceeds n_clips {}",
                self.train_clips, self.n_clips
            )));
        }
        if self.video_h % self.latent_h != 0 || self.video_w % self.latent_w != 0 {
            return Err(Error::Config(format!(
                "video {}×{} must be divisible by latent {}×{} for pooling",
                self.video_h, self.video_w, self.latent_h, self.latent_w
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        if self.tr_seconds <= 0.0
            || self.lag_seconds < 0.0
            || ((self.lag_seconds / self.tr_seconds)
                - (self.lag_seconds / self.tr_seconds).round())
            .abs()
                > 1e-9
        {
            return Err(Error::Config(format!(
                "lag {} s must be a whole number of TRs (TR = {} s)",
                self.lag_seconds, self.tr_seconds
            )));
        }
        Ok(())
    }

    pub fn subject_ids(&self) -> Vec<String> {
        (0..self.n_subjects).map(|i| format!("sub{i}")).collect()
    }

    pub fn clip_ids(&self) -> Vec<String> {
        (0..self.n_clips).map(|i| format!("clip{i:03}")).collect()
    }

    fn signal_voxels(&self, subject_index: usize) -> usize {
        self.base_signal_voxels + subject_index * self.signal_voxel_step
    }

    fn raw_voxels(&self, subject_index: usize) -> usize {
        self.signal_voxels(subject_index) + self.noise_voxels
    }
}

/// Per-clip texture/motion parameters, derived deterministically from the
/// clip's code so the whole video is a function of the code.
struct ClipMotion {
    kx1: f64,
    ky1: f64,
    kx2: f64,
    ky2: f64,
    phase1: f64,
    phase2: f64,
    vx: f64,
    vy: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn derive_motion(code: &[f64]) -> ClipMotion {
    let c = |i: usize| code[i % code.len()];
    let wave = |x: f64| 1.0 + (x.tanh().abs() * 2.999).floor();
    ClipMotion {
        kx1: wave(c(0)),
        ky1: wave(c(1)),
        kx2: wave(c(2) + 1.3),
        ky2: wave(c(3) - 0.7),
        phase1: c(4).tanh() * std::f64::consts::PI,
        phase2: c(5).tanh() * std::f64::consts::PI,
        // Strictly positive horizontal drift: monotonic translation. The
        // drift is several pixels per frame so consecutive frames are
        // contrastively separable even after pooling, while staying well
        // inside the range coarse-to-fine flow estimation can follow.
        vx: 2.0 + 6.0 * sigmoid(c(6)),
        vy: 2.0 * c(7).tanh(),
    }
}

/// Render one frame of the translating texture. Channel phases are offset
/// so the clip is colorful rather than grayscale.
fn texture_pixel(m: &ClipMotion, w: usize, h: usize, frame: usize, y: usize, x: usize, ch: usize) -> f32 {
    let fx = (x as f64 - m.vx * frame as f64) / w as f64;
    let fy = (y as f64 - m.vy * frame as f64) / h as f64;
    let tau = 2.0 * std::f64::consts::PI;
    let a = (tau * (m.kx1 * fx + m.ky1 * fy) + m.phase1 + ch as f64 * 0.4).sin();
    let b = (tau * (m.kx2 * fx + m.ky2 * fy) + m.phase2 - ch as f64 * 0.3).sin();
    (0.5 + 0.22 * a + 0.22 * b) as f32
}

fn render_clip(cfg: &FixtureConfig, m: &ClipMotion) -> Array4<f32> {
    Array4::from_shape_fn(
        (cfg.frames, cfg.video_h, cfg.video_w, 3),
        |(f, y, x, ch)| texture_pixel(m, cfg.video_w, cfg.video_h, f, y, x, ch),
    )
}

/// Average-pool a video into per-frame latents `[n, c, lh, lw]`; channels
/// beyond RGB carry the gray (mean-RGB) plane. Values are shifted so a
/// mid-gray pixel maps to zero, mirroring the roughly zero-mean latents a
/// real video VAE produces; the inverse (latent + 0.5, unpooled) recovers a
/// blurry video.
pub fn pool_video_to_latents(
    frames: &Array4<f32>,
    latent_c: usize,
    lh: usize,
    lw: usize,
) -> Array4<f32> {
    let (n, h, w, _) = frames.dim();
    let (py, px) = (h / lh, w / lw);
    Array4::from_shape_fn((n, latent_c, lh, lw), |(f, c, ly, lx)| {
        let mut acc = 0.0f32;
        for dy in 0..py {
            for dx in 0..px {
                let (y, x) = (ly * py + dy, lx * px + dx);
                acc += if c < 3 {
                    frames[[f, y, x, c]]
                } else {
                    (frames[[f, y, x, 0]] + frames[[f, y, x, 1]] + frames[[f, y, x, 2]]) / 3.0
                };
            }
        }
        acc / (py * px) as f32 - 0.5
    })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn write2(path: &Path, rows: usize, cols: usize, data: Vec<f32>) -> Result<()> {
    tensor::write_tensor(
        path,
        &ArrayD::from_shape_vec(IxDyn(&[rows, cols]), data).unwrap(),
    )
}

/// Generate the full synthetic dataset under `root`. Returns the raw
/// (train, test) manifests, which are also written to
/// `manifest.raw.train.txt` / `manifest.raw.test.txt`.
pub fn generate_fixture(
    root: &Path,
    seed: u64,
    cfg: &FixtureConfig,
) -> Result<(DatasetManifest, DatasetManifest)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clips = cfg.clip_ids();
    let subjects = cfg.subject_ids();
    let td = cfg.tokens * cfg.embed_dim;

    // 1. ground-truth codes
    let codes = Array2::from_shape_fn((cfg.n_clips, cfg.code_dim), |_| normal(&mut rng));
    write2(
        &root.join("truth").join("codes.svt"),
        cfg.n_clips,
        cfg.code_dim,
        codes.iter().map(|&v| v as f32).collect(),
    )?;

    // 2. per-level target maps, then targets
    for level in LEVELS {
        let map = Array2::from_shape_fn((cfg.code_dim, td), |_| {
            normal(&mut rng) / (cfg.code_dim as f64).sqrt()
        });
        let z = codes.dot(&map);
        for (ci, clip) in clips.iter().enumerate() {
            let path = crate::data::target_path(root, clip, level);
            tensor::write_tensor(
                &path,
                &ArrayD::from_shape_vec(
                    IxDyn(&[cfg.tokens, cfg.embed_dim]),
                    z.row(ci).iter().map(|&v| v as f32).collect(),
                )
                .unwrap(),
            )?;
        }
    }

    // 3. videos and pooled latents (deterministic functions of the codes)
    let lat_dim = cfg.frames * cfg.latent_c * cfg.latent_h * cfg.latent_w;
    let mut lat_rows = Array2::<f64>::zeros((cfg.n_clips, lat_dim));
    for (ci, clip) in clips.iter().enumerate() {
        let code: Vec<f64> = codes.row(ci).to_vec();
        let motion = derive_motion(&code);
        let frames = render_clip(cfg, &motion);
        tensor::write_tensor(
            &root.join("videos").join(format!("{clip}.svt")),
            &frames.clone().into_dyn(),
        )?;
        let latents = pool_video_to_latents(&frames, cfg.latent_c, cfg.latent_h, cfg.latent_w);
        for (k, &v) in latents.iter().enumerate() {
            lat_rows[[ci, k]] = v as f64;
        }
        tensor::write_tensor(
            &crate::data::latent_path(root, clip),
            &latents.into_dyn(),
        )?;
    }

    // 4. per-subject raw fMRI series (two repetitions each). Signal voxels
    // carry a linear image of the code plus a linear image of the motion
    // latents, so both decoding stages see their targets at full rank. The
    // latent map acts on mean-centered latents, normalized so each term
    // contributes unit variance per voxel.
    let lat_mean = lat_rows
        .mean_axis(ndarray::Axis(0))
        .unwrap_or_else(|| ndarray::Array1::zeros(lat_dim));
    let lat_dev = &lat_rows - &lat_mean.broadcast((cfg.n_clips, lat_dim)).unwrap();
    let lat_scale = (lat_dev.mapv(|v| v * v).mean().unwrap_or(0.0) * lat_dim as f64)
        .sqrt()
        .max(1e-6);
    let lag_rows = (cfg.lag_seconds / cfg.tr_seconds).round() as usize;
    let t_rows = lag_rows + cfg.n_clips;
    for (si, subject) in subjects.iter().enumerate() {
        let n_sig = cfg.signal_voxels(si);
        let v_raw = cfg.raw_voxels(si);
        let w_map = Array2::from_shape_fn((cfg.code_dim, n_sig), |_| {
            normal(&mut rng) / (cfg.code_dim as f64).sqrt()
        });
        let m_map = Array2::from_shape_fn((lat_dim, n_sig), |_| normal(&mut rng) / lat_scale);
        let response = codes.dot(&w_map) + lat_dev.dot(&m_map); // [n_clips, n_sig]
        let series = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            let mut out = Vec::with_capacity(t_rows * v_raw);
            for row in 0..t_rows {
                for v in 0..v_raw {
                    let val = if row >= lag_rows && v < n_sig {
                        response[[row - lag_rows, v]] + cfg.noise_sigma * normal(rng)
                    } else {
                        normal(rng)
                    };
                    out.push(val as f32);
                }
            }
            out
        };
        let rep_a = series(&mut rng);
        let rep_b = series(&mut rng);
        let dir = root.join("raw").join(subject);
        write2(&dir.join("rep_a.svt"), t_rows, v_raw, rep_a)?;
        write2(&dir.join("rep_b.svt"), t_rows, v_raw, rep_b)?;
    }

    // 5. manifests
    let entry = |clip: &str, subject: &str| ManifestEntry {
        clip_id: clip.to_string(),
        subject_id: subject.to_string(),
        fmri_path: format!("raw/{subject}/rep_a.svt"),
        video_path: format!("videos/{clip}.svt"),
        caption_path: format!("captions/{clip}.txt"),
    };
    let collect = |range: std::ops::Range<usize>| -> Vec<ManifestEntry> {
        let mut out = Vec::new();
        for ci in range {
            for s in &subjects {
                out.push(entry(&clips[ci], s));
            }
        }
        out
    };
    let train = DatasetManifest {
        split: Split::Train,
        tr_seconds: cfg.tr_seconds,
        lag_seconds: cfg.lag_seconds,
        entries: collect(0..cfg.train_clips),
    };
    let test = DatasetManifest {
        split: Split::Test,
        tr_seconds: cfg.tr_seconds,
        lag_seconds: cfg.lag_seconds,
        entries: collect(cfg.train_clips..cfg.n_clips),
    };
    train.save(&root.join("manifest.raw.train.txt"))?;
    test.save(&root.join("manifest.raw.test.txt"))?;
    Ok((train, test))
}
