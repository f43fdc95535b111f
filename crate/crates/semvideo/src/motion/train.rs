//! Single-phase trainer for the motion decoder.
//!
//! Conditioning embeddings are decoded once per clip by a frozen motion-level
//! semantic model (full inference path, seeded per clip), then the decoder is
//! fit with AdamW under a one-cycle learning-rate schedule. Every epoch ends
//! with a checkpoint and a rewritten curves CSV; `train_motion` resumes from
//! the newest checkpoint it finds in the output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array4, Ix1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::ckpt::{self, checkpoint_path, latest_checkpoint};
use crate::data::{latent_path, DatasetManifest};
use crate::error::{Error, Result};
use crate::nn::{
    assign_params, flatten_params, named_params, AdamW, LrSchedule,
};
use crate::semantic::{NoiseSchedule, SemanticDecoder};
use crate::tensor;

use super::{
    mad_loss_and_grad, AttentionConfig, MotionDecoder, MotionLatentSeq, MotionModelConfig,
};

/// One training pair plus its precomputed conditioning embedding.
#[derive(Debug, Clone)]
pub struct MotionSample {
    pub subject_id: String,
    pub clip_id: String,
    /// Processed fMRI vector.
    pub x: Array1<f64>,
    /// Reference video latents `[n, c, h, w]`.
    pub target: Array4<f64>,
    /// Conditioning embedding decoded from the same scan.
    pub sem: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct MotionDataset {
    pub samples: Vec<MotionSample>,
    /// Subject id → processed fMRI width.
    pub subject_dims: BTreeMap<String, usize>,
}

fn required<T>(r: Result<T>, path: &Path) -> Result<T> {
    match r {
        Err(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::Validation(format!(
                "missing required file {}",
                path.display()
            )))
        }
        other => other,
    }
}

fn clip_seed(seed: u64, clip_id: &str) -> u64 {
    let digest = Sha256::digest(clip_id.as_bytes());
    let mut eight = [0u8; 8];
    eight.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(eight)
}

/// Read every manifest entry's processed scan and reference latents, and
/// decode the conditioning embedding with the frozen semantic model. The
/// semantic model must be trained on the motion caption level; its sampler
/// is seeded per clip so the dataset is reproducible.
pub fn load_motion_dataset(
    root: &Path,
    manifest: &DatasetManifest,
    sem_model: &SemanticDecoder,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<MotionDataset> {
    if sem_model.level != "motion" {
        return Err(Error::Validation(format!(
            "conditioning model was trained on level {:?}; the motion decoder needs \"motion\"",
            sem_model.level
        )));
    }
    let mut samples = Vec::with_capacity(manifest.entries.len());
    let mut subject_dims: BTreeMap<String, usize> = BTreeMap::new();
    let mut target_shape: Option<(usize, usize, usize, usize)> = None;
    for entry in &manifest.entries {
        let fmri_path = root.join(&entry.fmri_path);
        let t = required(tensor::read_tensor(&fmri_path), &fmri_path)?;
        let x = t
            .into_dimensionality::<Ix1>()
            .map_err(|_| {
                Error::Validation(format!(
                    "{}: processed scans must be rank-1",
                    fmri_path.display()
                ))
            })?
            .mapv(|v| v as f64);
        match subject_dims.get(&entry.subject_id) {
            None => {
                subject_dims.insert(entry.subject_id.clone(), x.len());
            }
            Some(&d) if d != x.len() => {
                return Err(Error::Validation(format!(
                    "subject {} has scans of widths {d} and {}",
                    entry.subject_id,
                    x.len()
                )));
            }
            _ => {}
        }

        let lat_path = latent_path(root, &entry.clip_id);
        let target = required(MotionLatentSeq::load(&lat_path, &entry.clip_id), &lat_path)?;
        let dim = target.latents.dim();
        match target_shape {
            None => target_shape = Some(dim),
            Some(s) if s != dim => {
                return Err(Error::Validation(format!(
                    "clip {} latents are {dim:?}, expected {s:?}",
                    entry.clip_id
                )));
            }
            _ => {}
        }

        let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(seed, &entry.clip_id));
        let sem = sem_model.predict(&entry.subject_id, &x, schedule, &mut rng)?;
        samples.push(MotionSample {
            subject_id: entry.subject_id.clone(),
            clip_id: entry.clip_id.clone(),
            x,
            target: target.latents,
            sem,
        });
    }
    Ok(MotionDataset {
        samples,
        subject_dims,
    })
}

/// Hyperparameters for [`train_motion`]. Defaults follow the published
/// recipe: 100 epochs, batches of 20, one-cycle schedule peaking at 3e-4.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionTrainConfig {
    pub model: MotionModelConfig,
    /// InfoNCE temperature.
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MotionTrainConfig {
    fn default() -> Self {
        MotionTrainConfig {
            model: MotionModelConfig::default(),
            tau: 0.07,
            epochs: 100,
            batch_size: 20,
            max_lr: 3e-4,
            weight_decay: 1e-2,
            seed: 0,
        }
    }
}

impl MotionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.tau <= 0.0 {
            return Err(Error::Validation("temperature must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation(
                "epochs and batch size must be positive".into(),
            ));
        }
        if self.max_lr <= 0.0 || !self.max_lr.is_finite() {
            return Err(Error::Validation("max_lr must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Validation("weight decay cannot be negative".into()));
        }
        Ok(())
    }

    /// Short fingerprint used to refuse resuming under a changed recipe.
    pub fn hash(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let _ = write!(
            s,
            "frames={};ec={};eg={};oc={};up={:?};dc={:?};proj={:?};st={};sw={};\
             spat={}x{};temp={}x{};cross={}x{};tau={};epochs={};batch={};lr={};wd={};seed={}",
            m.frames,
            m.embed_channels,
            m.embed_grid,
            m.out_channels,
            m.up_factors,
            m.decoder_channels,
            m.proj_channels,
            m.sem_tokens,
            m.sem_width,
            m.spatial.heads,
            m.spatial.head_dim,
            m.temporal.heads,
            m.temporal.head_dim,
            m.cross.heads,
            m.cross.head_dim,
            self.tau,
            self.epochs,
            self.batch_size,
            self.max_lr,
            self.weight_decay,
            self.seed
        );
        let digest = Sha256::digest(s.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-epoch loss averages, in sample units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionEpochLoss {
    pub epoch: usize,
    pub l1: f64,
    pub contrastive: f64,
    pub total: f64,
}

pub const MOTION_CURVES_HEADER: &str = "epoch,l1,contrastive,total";

pub fn save_motion_curves(path: &Path, curves: &[MotionEpochLoss]) -> Result<()> {
    let mut text = String::from(MOTION_CURVES_HEADER);
    text.push('\n');
    for c in curves {
        let _ = writeln!(text, "{},{},{},{}", c.epoch, c.l1, c.contrastive, c.total);
    }
    tensor::atomic_write(path, text.as_bytes())
}

pub fn load_motion_curves(path: &Path) -> Result<Vec<MotionEpochLoss>> {
    let text = crate::error::missing_as_validation(fs::read_to_string(path), path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MOTION_CURVES_HEADER) {
        return Err(Error::Validation(format!(
            "{}: expected header {MOTION_CURVES_HEADER:?}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Validation(format!(
                "{}: malformed row {line:?}",
                path.display()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            parts[i]
                .parse()
                .map_err(|_| Error::Validation(format!("{}: bad number in {line:?}", path.display())))
        };
        out.push(MotionEpochLoss {
            epoch: parts[0]
                .parse()
                .map_err(|_| Error::Validation(format!("{}: bad epoch in {line:?}", path.display())))?,
            l1: num(1)?,
            contrastive: num(2)?,
            total: num(3)?,
        });
    }
    Ok(out)
}

/// Header contents of a motion checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionCheckpointHeader {
    pub epoch: usize,
    pub config_hash: String,
    pub model: MotionModelConfig,
    pub subjects: Vec<(String, usize)>,
}

pub fn save_motion_checkpoint(
    path: &Path,
    model: &MotionDecoder,
    header: &MotionCheckpointHeader,
    opt: Option<&AdamW>,
) -> Result<()> {
    let params = named_params(model);
    let m = &header.model;
    let mut head = String::new();
    let _ = writeln!(head, "{}", ckpt::MAGIC_LINE);
    let _ = writeln!(head, "kind motion");
    let _ = writeln!(head, "epoch {}", header.epoch);
    let _ = writeln!(head, "config_hash {}", header.config_hash);
    let _ = writeln!(head, "frames {}", m.frames);
    let _ = writeln!(head, "embed_channels {}", m.embed_channels);
    let _ = writeln!(head, "embed_grid {}", m.embed_grid);
    let _ = writeln!(head, "out_channels {}", m.out_channels);
    let _ = writeln!(
        head,
        "up_factors {} {} {}",
        m.up_factors[0], m.up_factors[1], m.up_factors[2]
    );
    let _ = writeln!(
        head,
        "decoder_channels {} {}",
        m.decoder_channels[0], m.decoder_channels[1]
    );
    let mut proj = String::from("proj_channels");
    for p in &m.proj_channels {
        let _ = write!(proj, " {p}");
    }
    let _ = writeln!(head, "{proj}");
    let _ = writeln!(head, "sem_tokens {}", m.sem_tokens);
    let _ = writeln!(head, "sem_width {}", m.sem_width);
    let _ = writeln!(head, "spatial {} {}", m.spatial.heads, m.spatial.head_dim);
    let _ = writeln!(head, "temporal {} {}", m.temporal.heads, m.temporal.head_dim);
    let _ = writeln!(head, "cross {} {}", m.cross.heads, m.cross.head_dim);
    ckpt::push_common_lines(&mut head, &header.subjects, &params, opt);
    ckpt::write_file(path, head, &params, opt)
}

pub fn load_motion_checkpoint(
    path: &Path,
) -> Result<(MotionDecoder, MotionCheckpointHeader, Option<AdamW>)> {
    let mut raw = ckpt::RawCheckpoint::parse(path)?;
    raw.expect_kind("motion")?;
    let attn = |key: &str| -> Result<AttentionConfig> {
        let v: Vec<usize> = raw.get_list(key)?;
        if v.len() != 2 {
            return Err(raw.bad(format!("{key} line needs 2 numbers")));
        }
        Ok(AttentionConfig {
            heads: v[0],
            head_dim: v[1],
        })
    };
    let up: Vec<usize> = raw.get_list("up_factors")?;
    let dc: Vec<usize> = raw.get_list("decoder_channels")?;
    if up.len() != 3 || dc.len() != 2 {
        return Err(raw.bad("malformed decoder geometry"));
    }
    let model_cfg = MotionModelConfig {
        frames: raw.get_num("frames")?,
        embed_channels: raw.get_num("embed_channels")?,
        embed_grid: raw.get_num("embed_grid")?,
        out_channels: raw.get_num("out_channels")?,
        up_factors: [up[0], up[1], up[2]],
        decoder_channels: [dc[0], dc[1]],
        proj_channels: raw.get_list("proj_channels")?,
        sem_tokens: raw.get_num("sem_tokens")?,
        sem_width: raw.get_num("sem_width")?,
        spatial: attn("spatial")?,
        temporal: attn("temporal")?,
        cross: attn("cross")?,
    };
    let header = MotionCheckpointHeader {
        epoch: raw.get_num("epoch")?,
        config_hash: raw.get("config_hash")?.to_string(),
        model: model_cfg.clone(),
        subjects: raw.subjects.clone(),
    };
    let dims: BTreeMap<String, usize> = raw.subjects.iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = MotionDecoder::new(&dims, model_cfg, &mut rng)?;
    let flat = raw.read_params(&named_params(&model))?;
    assign_params(&mut model, &flat);
    let opt = raw.read_adam()?;
    raw.finish()?;
    Ok((model, header, opt))
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug)]
pub struct MotionTrainedModel {
    pub model: MotionDecoder,
    pub curves: Vec<MotionEpochLoss>,
    /// Epoch of the checkpoint this run resumed from, if any.
    pub resumed_from: Option<usize>,
}

/// Fit the motion decoder on a loaded dataset, checkpointing each epoch
/// into `out_dir` and resuming from the newest checkpoint found there.
pub fn train_motion(
    dataset: &MotionDataset,
    cfg: &MotionTrainConfig,
    out_dir: &Path,
) -> Result<MotionTrainedModel> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::Validation("the training set is empty".into()));
    }
    let m = &cfg.model;
    let want = (m.frames, m.out_channels, m.out_grid(), m.out_grid());
    for s in &dataset.samples {
        if s.target.dim() != want {
            return Err(Error::Validation(format!(
                "clip {} latents are {:?}, model decodes {want:?}",
                s.clip_id,
                s.target.dim()
            )));
        }
        if s.sem.dim() != (m.sem_tokens, m.sem_width) {
            return Err(Error::Validation(format!(
                "clip {} conditioning is {:?}, model expects {:?}",
                s.clip_id,
                s.sem.dim(),
                (m.sem_tokens, m.sem_width)
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_hash = cfg.hash();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MotionDecoder::new(&dataset.subject_dims, m.clone(), &mut rng)?;
    let param_count = flatten_params(&model).len();
    let mut opt = AdamW::new(param_count, cfg.weight_decay);
    let mut curves: Vec<MotionEpochLoss> = Vec::new();
    let mut start_epoch = 0;
    let mut resumed_from = None;

    if let Some(ckpt_path) = latest_checkpoint(out_dir)? {
        let (loaded, header, loaded_opt) = load_motion_checkpoint(&ckpt_path)?;
        if header.config_hash != config_hash {
            return Err(Error::Validation(format!(
                "{} was written under config {} but the current config is {config_hash}; \
                 refusing to resume",
                ckpt_path.display(),
                header.config_hash
            )));
        }
        model = loaded;
        start_epoch = header.epoch;
        resumed_from = Some(header.epoch);
        match loaded_opt {
            Some(o) if o.m.len() == param_count => opt = o,
            _ => {}
        }
        let curves_path = out_dir.join("curves.csv");
        if curves_path.exists() {
            curves = load_motion_curves(&curves_path)?;
            curves.retain(|c| c.epoch <= start_epoch);
        }
    }

    let n = dataset.samples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = LrSchedule::OneCycle {
        max_lr: cfg.max_lr,
        total_steps: (cfg.epochs * steps_per_epoch) as u64,
    };

    for epoch in start_epoch + 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut erng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
        order.shuffle(&mut erng);
        let (mut sum_l1, mut sum_con, mut sum_total) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = model.zeros_like();
            let inv = 1.0 / batch.len() as f64;
            for &idx in batch {
                let s = &dataset.samples[idx];
                let (lat, cache) = model.forward(&s.subject_id, &s.x, &s.sem)?;
                let (b, dlat) = mad_loss_and_grad(&lat, &s.target, cfg.tau)?;
                sum_l1 += b.l1;
                sum_con += b.contrastive;
                sum_total += b.total;
                model.backward(&cache, &(dlat * inv), &mut grad);
            }
            let mut theta = flatten_params(&model);
            let g = flatten_params(&grad);
            let lr = schedule.lr_at(opt.step);
            opt.step(&mut theta, &g, lr);
            assign_params(&mut model, &theta);
        }
        let inv_n = 1.0 / n as f64;
        curves.push(MotionEpochLoss {
            epoch,
            l1: sum_l1 * inv_n,
            contrastive: sum_con * inv_n,
            total: sum_total * inv_n,
        });
        let header = MotionCheckpointHeader {
            epoch,
            config_hash: config_hash.clone(),
            model: m.clone(),
            subjects: dataset
                .subject_dims
                .iter()
                .map(|(s, &d)| (s.clone(), d))
                .collect(),
        };
        save_motion_checkpoint(&checkpoint_path(out_dir, epoch), &model, &header, Some(&opt))?;
        save_motion_curves(&out_dir.join("curves.csv"), &curves)?;
    }

    Ok(MotionTrainedModel {
        model,
        curves,
        resumed_from,
    })
}
