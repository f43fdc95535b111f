//! Two-phase training for the semantic decoders.
//!
//! Phase one trains everything — all subject projectors plus the shared
//! trunk — on the pooled dataset. Phase two continues on a single subject's
//! samples with the other subjects' projectors frozen and a fresh optimizer.
//! Every epoch ends with a checkpoint and a rewritten curves CSV, and
//! `train_semantic` resumes from the newest checkpoint it finds, so an
//! interrupted run picks up where it stopped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Ix1, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use crate::ckpt::latest_checkpoint;
use crate::ckpt::{self, checkpoint_path};
use crate::data::{target_path, DatasetManifest, EMBEDDING_LEVELS};
use crate::error::{Error, Result};
use crate::nn::{assign_params, flatten_params, named_params, AdamW, LrSchedule, Parameterized};
use crate::tensor;

use super::refiner::RefinerConfig;
use super::{
    batch_loss_and_grad, draw_batch, SemanticDecoder, SemanticLossConfig, SemanticModelConfig,
    SemanticSample,
};

/// In-memory training set for one embedding level.
#[derive(Debug, Clone)]
pub struct SemanticDataset {
    pub level: String,
    pub samples: Vec<SemanticSample>,
    /// Subject id → processed fMRI dimension.
    pub subject_dims: BTreeMap<String, usize>,
    pub tokens: usize,
    pub token_width: usize,
}

impl SemanticDataset {
    /// Indices of the samples belonging to one subject.
    pub fn subject_indices(&self, subject: &str) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.subject_id == subject)
            .map(|(i, _)| i)
            .collect()
    }
}

fn required<T>(r: Result<T>, what: &str, clip_id: &str) -> Result<T> {
    match r {
        Err(Error::Io { path, source }) if source.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::Validation(format!(
                "{what} for clip {clip_id} is missing: {}",
                path.display()
            )))
        }
        other => other,
    }
}

/// Load every manifest entry's processed fMRI vector and its target
/// embedding for `level`. Vectors must be rank-1 with a consistent length
/// per subject; targets rank-2 with one consistent shape.
pub fn load_semantic_dataset(
    root: &Path,
    man: &DatasetManifest,
    level: &str,
) -> Result<SemanticDataset> {
    if !EMBEDDING_LEVELS.contains(&level) {
        return Err(Error::Validation(format!(
            "unknown embedding level {level:?}"
        )));
    }
    if man.entries.is_empty() {
        return Err(Error::Validation("manifest has no entries".into()));
    }
    let mut samples = Vec::with_capacity(man.entries.len());
    let mut subject_dims: BTreeMap<String, usize> = BTreeMap::new();
    let mut shape: Option<(usize, usize)> = None;
    for entry in &man.entries {
        let x = required(
            tensor::read_tensor_f64(&root.join(&entry.fmri_path)),
            "processed fMRI vector",
            &entry.clip_id,
        )?
        .into_dimensionality::<Ix1>()
        .map_err(|_| {
            Error::Validation(format!(
                "fMRI tensor {} is not a vector; run preprocessing first",
                entry.fmri_path
            ))
        })?;
        match subject_dims.get(&entry.subject_id) {
            Some(&d) if d != x.len() => {
                return Err(Error::Validation(format!(
                    "subject {} has inconsistent vector lengths ({d} vs {})",
                    entry.subject_id,
                    x.len()
                )))
            }
            Some(_) => {}
            None => {
                subject_dims.insert(entry.subject_id.clone(), x.len());
            }
        }
        let tpath = target_path(root, &entry.clip_id, level);
        let target = required(
            tensor::read_tensor_f64(&tpath),
            "target embedding",
            &entry.clip_id,
        )?
        .into_dimensionality::<Ix2>()
        .map_err(|_| {
            Error::Validation(format!(
                "target embedding {} is not rank-2",
                tpath.display()
            ))
        })?;
        match shape {
            Some(s) if s != target.dim() => {
                return Err(Error::Validation(format!(
                    "target embeddings disagree on shape: {s:?} vs {:?}",
                    target.dim()
                )))
            }
            Some(_) => {}
            None => shape = Some(target.dim()),
        }
        samples.push(SemanticSample {
            subject_id: entry.subject_id.clone(),
            clip_id: entry.clip_id.clone(),
            x,
            target,
        });
    }
    let (tokens, token_width) = shape.expect("entries checked non-empty");
    Ok(SemanticDataset {
        level: level.to_string(),
        samples,
        subject_dims,
        tokens,
        token_width,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTrainConfig {
    pub model: SemanticModelConfig,
    pub loss: SemanticLossConfig,
    /// Pooled phase epochs.
    pub epochs: usize,
    /// Single-subject phase epochs.
    pub finetune_epochs: usize,
    pub batch_size: usize,
    /// Cosine-annealed peak learning rate.
    pub max_lr: f64,
    pub weight_decay: f64,
    /// Apply the mixing augmentation to the contrastive term.
    pub mixco: bool,
    pub seed: u64,
}

impl Default for SemanticTrainConfig {
    fn default() -> Self {
        SemanticTrainConfig {
            model: SemanticModelConfig::default(),
            loss: SemanticLossConfig::default(),
            epochs: 100,
            finetune_epochs: 100,
            batch_size: 96,
            max_lr: 1e-4,
            weight_decay: 1e-2,
            mixco: true,
            seed: 0,
        }
    }
}

impl SemanticTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_lr <= 0.0 {
            return Err(Error::Config("max_lr must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.epochs + self.finetune_epochs == 0 {
            return Err(Error::Config("at least one training epoch required".into()));
        }
        Ok(())
    }

    /// Short hash identifying this configuration; stored in checkpoints so
    /// a resume against a changed config is caught instead of silently
    /// continuing.
    pub fn hash(&self) -> String {
        let m = &self.model;
        let l = &self.loss;
        let mut s = String::new();
        let _ = write!(
            s,
            "semantic;{};{:?};{};{};{};{};{};{};{};{};{};{};{};{};{};{};{}",
            m.latent_dim,
            m.hidden,
            m.tokens,
            m.token_width,
            m.refiner.layers,
            m.refiner.heads,
            m.refiner.head_dim,
            l.lambda_refine,
            l.lambda_softclip,
            l.tau,
            l.timesteps,
            l.beta_start,
            l.beta_end,
            self.epochs,
            self.finetune_epochs,
            self.batch_size,
            self.seed,
        );
        let _ = write!(s, ";{};{};{}", self.max_lr, self.weight_decay, self.mixco);
        let digest = Sha256::digest(s.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    Pretrain,
    Finetune,
}

impl TrainPhase {
    pub fn name(self) -> &'static str {
        match self {
            TrainPhase::Pretrain => "pretrain",
            TrainPhase::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(TrainPhase::Pretrain),
            "finetune" => Ok(TrainPhase::Finetune),
            other => Err(Error::Validation(format!("unknown phase {other:?}"))),
        }
    }
}

/// Per-epoch loss summary (batch-averaged components).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    pub mse: f64,
    pub softclip: f64,
    pub refine: f64,
    pub total: f64,
}

pub const CURVES_HEADER: &str = "epoch,mse,softclip,refine,total";

pub fn save_curves(path: &Path, curves: &[EpochLosses]) -> Result<()> {
    let mut s = String::from(CURVES_HEADER);
    s.push('\n');
    for c in curves {
        let _ = writeln!(s, "{},{},{},{},{}", c.epoch, c.mse, c.softclip, c.refine, c.total);
    }
    tensor::atomic_write(path, s.as_bytes())
}

pub fn load_curves(path: &Path) -> Result<Vec<EpochLosses>> {
    let text = crate::error::missing_as_validation(fs::read_to_string(path), path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CURVES_HEADER => {}
        other => {
            return Err(Error::Validation(format!(
                "curves file {} has header {other:?}, expected {CURVES_HEADER:?}",
                path.display()
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Validation(format!(
                "curves line {} has {} fields, expected 5",
                i + 2,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Validation(format!("bad number {s:?} in curves line {}", i + 2)))
        };
        out.push(EpochLosses {
            epoch: fields[0]
                .parse()
                .map_err(|_| Error::Validation(format!("bad epoch {:?}", fields[0])))?,
            mse: num(fields[1])?,
            softclip: num(fields[2])?,
            refine: num(fields[3])?,
            total: num(fields[4])?,
        });
    }
    Ok(out)
}

/// Everything a checkpoint records besides the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub level: String,
    pub epoch: usize,
    pub phase: TrainPhase,
    pub finetune_subject: Option<String>,
    pub config_hash: String,
    pub model: SemanticModelConfig,
    pub subjects: Vec<(String, usize)>,
}

/// Serialize the model (and optionally optimizer state) into one file:
/// a structured-text header, an `end` line, then one rank-1 tensor record
/// per named parameter in visit order.
pub fn save_checkpoint(
    path: &Path,
    model: &SemanticDecoder,
    header: &CheckpointHeader,
    opt: Option<&AdamW>,
) -> Result<()> {
    let params = named_params(model);
    let mut head = String::new();
    let _ = writeln!(head, "{}", ckpt::MAGIC_LINE);
    let _ = writeln!(head, "kind semantic");
    let _ = writeln!(head, "level {}", header.level);
    let _ = writeln!(head, "epoch {}", header.epoch);
    let _ = writeln!(head, "phase {}", header.phase.name());
    if let Some(s) = &header.finetune_subject {
        let _ = writeln!(head, "finetune_subject {s}");
    }
    let _ = writeln!(head, "config_hash {}", header.config_hash);
    let m = &header.model;
    let _ = writeln!(head, "latent_dim {}", m.latent_dim);
    let mut hidden = String::from("hidden");
    for h in &m.hidden {
        let _ = write!(hidden, " {h}");
    }
    let _ = writeln!(head, "{hidden}");
    let _ = writeln!(head, "tokens {}", m.tokens);
    let _ = writeln!(head, "token_width {}", m.token_width);
    let _ = writeln!(
        head,
        "refiner {} {} {}",
        m.refiner.layers, m.refiner.heads, m.refiner.head_dim
    );
    ckpt::push_common_lines(&mut head, &header.subjects, &params, opt);
    ckpt::write_file(path, head, &params, opt)
}

/// Read back a checkpoint written by [`save_checkpoint`]. The model is
/// rebuilt from the header's dimensions and the parameter records are
/// matched by name and order.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(SemanticDecoder, CheckpointHeader, Option<AdamW>)> {
    let mut raw = ckpt::RawCheckpoint::parse(path)?;
    raw.expect_kind("semantic")?;
    let refiner_parts: Vec<usize> = raw.get_list("refiner")?;
    if refiner_parts.len() != 3 {
        return Err(raw.bad("refiner line needs 3 numbers"));
    }
    let model_cfg = SemanticModelConfig {
        latent_dim: raw.get_num("latent_dim")?,
        hidden: raw.get_list("hidden")?,
        tokens: raw.get_num("tokens")?,
        token_width: raw.get_num("token_width")?,
        refiner: RefinerConfig {
            layers: refiner_parts[0],
            heads: refiner_parts[1],
            head_dim: refiner_parts[2],
        },
    };
    let phase_name = raw.get("phase")?.to_string();
    let header = CheckpointHeader {
        level: raw.get("level")?.to_string(),
        epoch: raw.get_num("epoch")?,
        phase: TrainPhase::parse(&phase_name)
            .map_err(|_| raw.bad(format!("bad phase {phase_name:?}")))?,
        finetune_subject: raw.fields.get("finetune_subject").map(|s| s.to_string()),
        config_hash: raw.get("config_hash")?.to_string(),
        model: model_cfg.clone(),
        subjects: raw.subjects.clone(),
    };

    let dims: BTreeMap<String, usize> = raw.subjects.iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = SemanticDecoder::new(&header.level, &dims, model_cfg, &mut rng)?;
    let flat = raw.read_params(&named_params(&model))?;
    assign_params(&mut model, &flat);
    let opt = raw.read_adam()?;
    raw.finish()?;
    Ok((model, header, opt))
}


/// Per-scalar keep mask for the single-subject phase: everything except the
/// other subjects' projectors.
fn finetune_mask(model: &SemanticDecoder, subject: &str) -> Vec<bool> {
    let own = format!("projector.{subject}.");
    let mut mask = Vec::new();
    model.visit(&mut |name, slice| {
        let keep = !name.starts_with("projector.") || name.starts_with(own.as_str());
        mask.extend(std::iter::repeat(keep).take(slice.len()));
    });
    mask
}

fn gather(flat: &[f64], mask: &[bool]) -> Vec<f64> {
    flat.iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect()
}

fn scatter(flat: &mut [f64], mask: &[bool], sub: &[f64]) {
    let mut it = sub.iter();
    for (v, &m) in flat.iter_mut().zip(mask) {
        if m {
            *v = *it.next().expect("sub-vector matches mask");
        }
    }
    assert!(it.next().is_none(), "sub-vector matches mask");
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug)]
pub struct TrainedSemantic {
    pub model: SemanticDecoder,
    pub curves: Vec<EpochLosses>,
    /// Epoch of the checkpoint this run resumed from, if any.
    pub resumed_from: Option<usize>,
}

struct PhasePlan {
    phase: TrainPhase,
    /// Inclusive 1-based global epoch range.
    first: usize,
    last: usize,
    indices: Vec<usize>,
    mask: Vec<bool>,
}

/// Train a decoder for `dataset.level`: a pooled phase over all subjects
/// followed by a fine-tuning phase on `finetune_subject`. Checkpoints land
/// in `out_dir/epoch_NNNN.ckpt` (epoch numbering continues across phases)
/// next to `out_dir/curves.csv`; an existing checkpoint resumes the run.
pub fn train_semantic(
    dataset: &SemanticDataset,
    finetune_subject: &str,
    cfg: &SemanticTrainConfig,
    out_dir: &Path,
) -> Result<TrainedSemantic> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    if dataset.tokens != cfg.model.tokens || dataset.token_width != cfg.model.token_width {
        return Err(Error::Validation(format!(
            "dataset targets are {}x{}, model expects {}x{}",
            dataset.tokens, dataset.token_width, cfg.model.tokens, cfg.model.token_width
        )));
    }
    let finetune_indices = dataset.subject_indices(finetune_subject);
    if cfg.finetune_epochs > 0 && finetune_indices.is_empty() {
        return Err(Error::Validation(format!(
            "no samples for fine-tune subject {finetune_subject}"
        )));
    }
    let schedule = cfg.loss.schedule()?;
    let hash = cfg.hash();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // Start fresh or resume from the newest checkpoint.
    let mut resumed_from = None;
    let mut restored: Option<(TrainPhase, AdamW)> = None;
    let mut start_epoch = 0;
    let mut model = match latest_checkpoint(out_dir)? {
        Some(path) => {
            let (m, hdr, opt) = load_checkpoint(&path)?;
            if hdr.config_hash != hash {
                return Err(Error::Validation(format!(
                    "checkpoint {} was written under config {} but the current config is {hash}; \
                     refusing to resume",
                    path.display(),
                    hdr.config_hash
                )));
            }
            if hdr.level != dataset.level {
                return Err(Error::Validation(format!(
                    "checkpoint level {} does not match dataset level {}",
                    hdr.level, dataset.level
                )));
            }
            start_epoch = hdr.epoch;
            resumed_from = Some(hdr.epoch);
            restored = opt.map(|o| (hdr.phase, o));
            m
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            SemanticDecoder::new(&dataset.level, &dataset.subject_dims, cfg.model.clone(), &mut rng)?
        }
    };
    let mut curves = if start_epoch > 0 {
        let mut c = load_curves(&out_dir.join("curves.csv")).unwrap_or_default();
        c.retain(|e| e.epoch <= start_epoch);
        c
    } else {
        Vec::new()
    };

    let subjects: Vec<(String, usize)> = dataset
        .subject_dims
        .iter()
        .map(|(k, &v)| (k.clone(), v))
        .collect();
    let all_mask = vec![true; flatten_params(&model).len()];
    let mut phases = Vec::new();
    if cfg.epochs > 0 {
        phases.push(PhasePlan {
            phase: TrainPhase::Pretrain,
            first: 1,
            last: cfg.epochs,
            indices: (0..dataset.samples.len()).collect(),
            mask: all_mask.clone(),
        });
    }
    if cfg.finetune_epochs > 0 {
        phases.push(PhasePlan {
            phase: TrainPhase::Finetune,
            first: cfg.epochs + 1,
            last: cfg.epochs + cfg.finetune_epochs,
            indices: finetune_indices,
            mask: finetune_mask(&model, finetune_subject),
        });
    }

    let mut flat = flatten_params(&model);
    for plan in &phases {
        if start_epoch >= plan.last {
            continue;
        }
        let sub_n = plan.mask.iter().filter(|&&b| b).count();
        let steps_per_epoch = plan.indices.len().div_ceil(cfg.batch_size);
        let total_steps = ((plan.last - plan.first + 1) * steps_per_epoch) as u64;
        let lr_schedule = LrSchedule::Cosine {
            max_lr: cfg.max_lr,
            total_steps,
        };
        // Reuse restored optimizer state only when resuming inside this
        // phase; a phase boundary starts a fresh optimizer.
        let mut opt = match restored.take() {
            Some((phase, o))
                if phase == plan.phase && start_epoch >= plan.first && o.m.len() == sub_n =>
            {
                o
            }
            _ => AdamW::new(sub_n, cfg.weight_decay),
        };

        for epoch in plan.first..=plan.last {
            if epoch <= start_epoch {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
            let mut order = plan.indices.clone();
            order.shuffle(&mut rng);
            let mut sums = [0.0f64; 4];
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&SemanticSample> =
                    chunk.iter().map(|&i| &dataset.samples[i]).collect();
                let draws = draw_batch(
                    batch.len(),
                    dataset.tokens,
                    dataset.token_width,
                    &schedule,
                    cfg.mixco,
                    &mut rng,
                );
                let (bd, grad) =
                    batch_loss_and_grad(&model, &batch, &cfg.loss, &schedule, &draws)?;
                let gflat = flatten_params(&grad);
                let lr = lr_schedule.lr_at(opt.step);
                let mut sub_p = gather(&flat, &plan.mask);
                let sub_g = gather(&gflat, &plan.mask);
                opt.step(&mut sub_p, &sub_g, lr);
                scatter(&mut flat, &plan.mask, &sub_p);
                assign_params(&mut model, &flat);
                sums[0] += bd.mse;
                sums[1] += bd.softclip;
                sums[2] += bd.refine;
                sums[3] += bd.total;
                batches += 1;
            }
            let n = batches.max(1) as f64;
            curves.push(EpochLosses {
                epoch,
                mse: sums[0] / n,
                softclip: sums[1] / n,
                refine: sums[2] / n,
                total: sums[3] / n,
            });
            let header = CheckpointHeader {
                level: dataset.level.clone(),
                epoch,
                phase: plan.phase,
                finetune_subject: (plan.phase == TrainPhase::Finetune)
                    .then(|| finetune_subject.to_string()),
                config_hash: hash.clone(),
                model: cfg.model.clone(),
                subjects: subjects.clone(),
            };
            save_checkpoint(&checkpoint_path(out_dir, epoch), &model, &header, Some(&opt))?;
            save_curves(&out_dir.join("curves.csv"), &curves)?;
        }
    }

    Ok(TrainedSemantic {
        model,
        curves,
        resumed_from,
    })
}
