//! Semantic decoder: maps per-subject fMRI vectors to CLIP-text-shaped
//! embedding matrices, one decoder instance per embedding level.
//!
//! Architecture: a subject-specific linear projection into a shared latent
//! space, layer normalization, a shared MLP emitting the flattened embedding,
//! and a causal-transformer refiner that denoises embeddings conditioned on
//! the MLP output. Training combines an MSE term on the MLP output, a
//! soft-label contrastive term (SoftCLIP), and a denoising term through the
//! refiner; inference runs the MLP and then ancestral sampling through the
//! refiner.

pub mod diffusion;
pub mod refiner;
mod roi;
mod train;

pub use diffusion::{sample_embedding, standard_normal_like, NoiseSchedule};
pub use refiner::{Refiner, RefinerConfig};
pub use roi::{roi_importance, save_roi_csv, voxel_importance, RoiImportance, RoiTable};
pub use train::{
    latest_checkpoint, load_checkpoint, load_curves, load_semantic_dataset, save_checkpoint,
    save_curves, train_semantic, CheckpointHeader, EpochLosses, SemanticDataset,
    SemanticTrainConfig, TrainPhase, TrainedSemantic, CURVES_HEADER,
};

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Beta;

use crate::error::{Error, Result};
use crate::nn::{mse_and_grad, softmax_rows, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache, Parameterized};

/// Token count of the published embedding layout.
pub const EMBED_TOKENS: usize = 77;
/// Channel width of the published embedding layout.
pub const EMBED_WIDTH: usize = 768;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticModelConfig {
    /// Shared latent width the subject projectors map into.
    pub latent_dim: usize,
    /// Hidden widths of the shared MLP; the output layer is appended
    /// automatically, so `hidden.len() + 1` affine layers total.
    pub hidden: Vec<usize>,
    pub tokens: usize,
    pub token_width: usize,
    pub refiner: RefinerConfig,
}

impl Default for SemanticModelConfig {
    fn default() -> Self {
        SemanticModelConfig {
            latent_dim: 4096,
            hidden: vec![4096, 4096, 4096],
            tokens: EMBED_TOKENS,
            token_width: EMBED_WIDTH,
            refiner: RefinerConfig::default(),
        }
    }
}

impl SemanticModelConfig {
    pub fn embedding_dim(&self) -> usize {
        self.tokens * self.token_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.tokens == 0 || self.token_width == 0 {
            return Err(Error::Config(
                "semantic model dimensions must be positive".into(),
            ));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("semantic MLP hidden widths must be positive".into()));
        }
        self.refiner.validate()
    }
}

/// Weights and schedule parameters of the combined training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLossConfig {
    pub lambda_refine: f64,
    pub lambda_softclip: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Denoising timesteps.
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for SemanticLossConfig {
    fn default() -> Self {
        SemanticLossConfig {
            lambda_refine: 0.5,
            lambda_softclip: 0.1,
            tau: 0.07,
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl SemanticLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_refine < 0.0 || self.lambda_softclip < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!(
                "contrastive temperature must be positive, got {}",
                self.tau
            )));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// One training/evaluation sample: which subject produced the fMRI vector
/// and which clip's embedding it should decode to.
#[derive(Debug, Clone)]
pub struct SemanticSample {
    pub subject_id: String,
    pub clip_id: String,
    pub x: Array1<f64>,
    pub target: Array2<f64>,
}

/// The per-level decoder.
#[derive(Debug, Clone)]
pub struct SemanticDecoder {
    pub level: String,
    pub config: SemanticModelConfig,
    /// Subject id → projector into the shared latent space.
    pub projectors: BTreeMap<String, Linear>,
    pub input_norm: LayerNorm,
    pub mlp: Mlp,
    pub refiner: Refiner,
}

pub(crate) struct EmbedCache {
    x_row: Array2<f64>,
    ln: LayerNormCache,
    /// Normalized latent x′ (the MLP input), kept for the mixing path.
    xp: Array2<f64>,
    mlp: MlpCache,
}

impl SemanticDecoder {
    /// Build a fresh decoder for `level` covering the given subjects (id →
    /// input dimension). Parameter draw order is fixed (projectors in
    /// subject order, then MLP, then refiner), which makes construction
    /// deterministic for a given RNG state.
    pub fn new(
        level: &str,
        subject_dims: &BTreeMap<String, usize>,
        config: SemanticModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if subject_dims.is_empty() {
            return Err(Error::Validation(
                "semantic decoder needs at least one subject".into(),
            ));
        }
        if !crate::data::EMBEDDING_LEVELS.contains(&level) {
            return Err(Error::Validation(format!(
                "unknown embedding level {level:?}"
            )));
        }
        let mut projectors = BTreeMap::new();
        for (subject, &dim) in subject_dims {
            if dim == 0 {
                return Err(Error::Validation(format!(
                    "subject {subject} has zero input dimension"
                )));
            }
            projectors.insert(subject.clone(), Linear::new(dim, config.latent_dim, rng));
        }
        let mut mlp_dims = vec![config.latent_dim];
        mlp_dims.extend_from_slice(&config.hidden);
        mlp_dims.push(config.embedding_dim());
        Ok(SemanticDecoder {
            level: level.to_string(),
            config: config.clone(),
            projectors,
            input_norm: LayerNorm::new(config.latent_dim),
            mlp: Mlp::new(&mlp_dims, rng),
            refiner: Refiner::new(config.tokens, config.token_width, config.refiner, rng)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        SemanticDecoder {
            level: self.level.clone(),
            config: self.config.clone(),
            projectors: self
                .projectors
                .iter()
                .map(|(k, v)| (k.clone(), v.zeros_like()))
                .collect(),
            input_norm: self.input_norm.zeros_like(),
            mlp: self.mlp.zeros_like(),
            refiner: self.refiner.zeros_like(),
        }
    }

    pub fn subjects(&self) -> Vec<&str> {
        self.projectors.keys().map(String::as_str).collect()
    }

    pub fn projector(&self, subject: &str) -> Result<&Linear> {
        self.projectors.get(subject).ok_or_else(|| {
            Error::Validation(format!(
                "subject {subject} is not registered with this decoder"
            ))
        })
    }

    fn check_input(&self, subject: &str, x: &Array1<f64>) -> Result<()> {
        let expect = self.projector(subject)?.w.nrows();
        if x.len() != expect {
            return Err(Error::Validation(format!(
                "fMRI vector for subject {subject} has {} entries, projector expects {expect}",
                x.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn embed_cached(
        &self,
        subject: &str,
        x: &Array1<f64>,
    ) -> Result<(Array2<f64>, EmbedCache)> {
        self.check_input(subject, x)?;
        let x_row = x
            .view()
            .insert_axis(Axis(0))
            .to_owned();
        let h = self.projector(subject)?.forward(&x_row);
        let (xp, ln) = self.input_norm.forward(&h);
        let (e, mlp) = self.mlp.forward(&xp);
        Ok((e, EmbedCache { x_row, ln, xp, mlp }))
    }

    /// The MLP-path embedding, reshaped to `[tokens, token_width]`. No
    /// refinement, no randomness.
    pub fn embed(&self, subject: &str, x: &Array1<f64>) -> Result<Array2<f64>> {
        let (e, _) = self.embed_cached(subject, x)?;
        Ok(reshape_tokens(&e, self.config.tokens, self.config.token_width))
    }

    /// Full inference: MLP embedding as conditioning, then iterative
    /// denoising through the refiner. Deterministic given the RNG state.
    pub fn predict(
        &self,
        subject: &str,
        x: &Array1<f64>,
        schedule: &NoiseSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array2<f64>> {
        let cond = self.embed(subject, x)?;
        sample_embedding(&self.refiner, &cond, schedule, rng)
    }
}

impl Parameterized for SemanticDecoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (subject, p) in &self.projectors {
            p.visit(&mut |n, s| f(&format!("projector.{subject}.{n}"), s));
        }
        self.input_norm.visit(&mut |n, s| f(&format!("norm.{n}"), s));
        self.mlp.visit(&mut |n, s| f(&format!("mlp.{n}"), s));
        self.refiner.visit(&mut |n, s| f(&format!("refiner.{n}"), s));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (subject, p) in &mut self.projectors {
            p.visit_mut(&mut |n, s| f(&format!("projector.{subject}.{n}"), s));
        }
        self.input_norm
            .visit_mut(&mut |n, s| f(&format!("norm.{n}"), s));
        self.mlp.visit_mut(&mut |n, s| f(&format!("mlp.{n}"), s));
        self.refiner
            .visit_mut(&mut |n, s| f(&format!("refiner.{n}"), s));
    }
}

fn reshape_tokens(flat: &Array2<f64>, tokens: usize, width: usize) -> Array2<f64> {
    flat.clone()
        .into_shape_with_order((tokens, width))
        .expect("embedding length matches token layout")
}

fn flatten_row(m: &Array2<f64>) -> Array2<f64> {
    m.clone()
        .into_shape_with_order((1, m.len()))
        .expect("contiguous")
}

/// Mean squared difference over all entries.
pub fn mse_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Validation(format!(
            "mse shapes differ: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    Ok(mse_and_grad(pred, target).0)
}

/// Soft-label contrastive loss over a batch of flattened embeddings.
///
/// Rows of `preds` and `targets` are L2-normalized, pairwise similarities
/// are scaled by `1/τ`, and each prediction row's similarity softmax is
/// scored by cross-entropy against the soft distribution given by its
/// target row's similarities to all target rows. The batch is summed, not
/// averaged.
pub fn softclip_loss(preds: &Array2<f64>, targets: &Array2<f64>, tau: f64) -> Result<f64> {
    check_softclip_inputs(preds, targets, tau)?;
    Ok(softclip_parts(preds, targets, tau, None).0)
}

fn check_softclip_inputs(preds: &Array2<f64>, targets: &Array2<f64>, tau: f64) -> Result<()> {
    if tau <= 0.0 {
        return Err(Error::Config(format!(
            "contrastive temperature must be positive, got {tau}"
        )));
    }
    if preds.dim() != targets.dim() {
        return Err(Error::Validation(format!(
            "softclip shapes differ: {:?} vs {:?}",
            preds.dim(),
            targets.dim()
        )));
    }
    if preds.nrows() == 0 {
        return Err(Error::Validation("softclip needs at least one row".into()));
    }
    Ok(())
}

/// Row-normalize, returning the normalized matrix and per-row norms (zero
/// rows stay zero and report norm 0).
fn normalize_rows_with_norms(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            row.mapv_inplace(|v| v / n);
        }
        norms.push(n);
    }
    (out, norms)
}

/// Loss plus gradient w.r.t. `preds`. `soft_labels` overrides the
/// target-derived distribution (used by the mixed-sample path).
fn softclip_parts(
    preds: &Array2<f64>,
    targets: &Array2<f64>,
    tau: f64,
    soft_labels: Option<&Array2<f64>>,
) -> (f64, Array2<f64>) {
    let (phat, pnorm) = normalize_rows_with_norms(preds);
    let (that, _) = normalize_rows_with_norms(targets);

    let p_sim = phat.dot(&that.t()) / tau;
    let p_soft = softmax_rows(&p_sim);
    let q = match soft_labels {
        Some(q) => q.clone(),
        None => softmax_rows(&(that.dot(&that.t()) / tau)),
    };

    let mut loss = 0.0;
    for (qr, pr) in q.rows().into_iter().zip(p_soft.rows()) {
        for (&qi, &pi) in qr.iter().zip(pr.iter()) {
            loss -= qi * pi.ln();
        }
    }

    // d loss / d similarity = softmax − labels, rowwise; then back through
    // the 1/τ scale and the row normalization of preds.
    let dsim = (&p_soft - &q) / tau;
    let dphat = dsim.dot(&that);
    let mut dpreds = Array2::zeros(preds.raw_dim());
    for i in 0..preds.nrows() {
        let n = pnorm[i];
        if n <= 1e-12 {
            continue;
        }
        let ph = phat.row(i);
        let dh = dphat.row(i);
        let inner: f64 = ph.iter().zip(dh.iter()).map(|(a, b)| a * b).sum();
        for (out, (&dhv, &phv)) in dpreds.row_mut(i).iter_mut().zip(dh.iter().zip(ph.iter())) {
            *out = (dhv - inner * phv) / n;
        }
    }
    (loss, dpreds)
}

/// Combine the three component losses with the configured weights.
pub fn total_loss(mse: f64, softclip: f64, refine: f64, cfg: &SemanticLossConfig) -> f64 {
    cfg.lambda_refine * refine + cfg.lambda_softclip * softclip + mse
}

/// Mixing metadata: row `i` was blended with row `partner[i]` using weight
/// `alpha[i]` on itself.
#[derive(Debug, Clone, PartialEq)]
pub struct MixcoMeta {
    pub partner: Vec<usize>,
    pub alpha: Vec<f64>,
}

/// Apply the mixing formula `αᵢ·xᵢ + (1−αᵢ)·x_{partner[i]}` rowwise.
pub fn mix_rows(batch: &Array2<f64>, partner: &[usize], alpha: &[f64]) -> Result<Array2<f64>> {
    let b = batch.nrows();
    if partner.len() != b || alpha.len() != b {
        return Err(Error::Validation(format!(
            "mixing metadata lengths ({}, {}) do not match batch size {b}",
            partner.len(),
            alpha.len()
        )));
    }
    if let Some(&bad) = partner.iter().find(|&&p| p >= b) {
        return Err(Error::Validation(format!(
            "mixing partner index {bad} out of range for batch size {b}"
        )));
    }
    let mut mixed = Array2::zeros(batch.raw_dim());
    for i in 0..b {
        let a = alpha[i];
        let own = batch.row(i);
        let other = batch.row(partner[i]);
        for (o, (&x, &y)) in mixed.row_mut(i).iter_mut().zip(own.iter().zip(other.iter())) {
            *o = a * x + (1.0 - a) * y;
        }
    }
    Ok(mixed)
}

fn draw_mixco(b: usize, rng: &mut impl Rng) -> MixcoMeta {
    let mut partner: Vec<usize> = (0..b).collect();
    partner.shuffle(rng);
    let beta = Beta::new(0.15, 0.15).expect("valid Beta parameters");
    let alpha: Vec<f64> = (0..b).map(|_| rng.sample(beta)).collect();
    MixcoMeta { partner, alpha }
}

/// Contrastive augmentation: blend each row with a random permutation
/// partner using a Beta(0.15, 0.15) coefficient. Needs at least two rows.
pub fn mixco_augment(batch: &Array2<f64>, rng: &mut impl Rng) -> Result<(Array2<f64>, MixcoMeta)> {
    if batch.nrows() < 2 {
        return Err(Error::Validation(
            "mixco augmentation needs a batch of at least 2".into(),
        ));
    }
    let meta = draw_mixco(batch.nrows(), rng);
    let mixed = mix_rows(batch, &meta.partner, &meta.alpha)?;
    Ok((mixed, meta))
}

/// Denoising loss seam: diffuse the target to step `t`, ask `denoiser` for a
/// clean reconstruction, and score it with MSE against the clean target.
pub fn denoised_target_mse(
    denoiser: impl FnOnce(&Array2<f64>, usize) -> Result<Array2<f64>>,
    target: &Array2<f64>,
    schedule: &NoiseSchedule,
    t: usize,
    noise: &Array2<f64>,
) -> Result<f64> {
    let z_t = schedule.q_sample(target, noise, t)?;
    let out = denoiser(&z_t, t)?;
    mse_loss(&out, target)
}

/// Denoising loss with explicit draws, so the value is a deterministic
/// function of its arguments.
pub fn refine_loss_with(
    model: &SemanticDecoder,
    subject: &str,
    x: &Array1<f64>,
    target: &Array2<f64>,
    schedule: &NoiseSchedule,
    t: usize,
    noise: &Array2<f64>,
) -> Result<f64> {
    let cond = model.embed(subject, x)?;
    denoised_target_mse(
        |z_t, step| model.refiner.forward(z_t, step, &cond).map(|(o, _)| o),
        target,
        schedule,
        t,
        noise,
    )
}

/// Denoising loss with a uniformly drawn timestep and fresh noise.
pub fn refine_loss(
    model: &SemanticDecoder,
    subject: &str,
    x: &Array1<f64>,
    target: &Array2<f64>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let t = rng.gen_range(1..=schedule.timesteps());
    let noise = standard_normal_like(target.nrows(), target.ncols(), rng);
    refine_loss_with(model, subject, x, target, schedule, t, &noise)
}

/// Everything randomly drawn for one batch step, captured up front so the
/// loss (and its gradient) is a pure function of model parameters.
#[derive(Debug, Clone)]
pub struct BatchDraws {
    pub t: Vec<usize>,
    pub noise: Vec<Array2<f64>>,
    pub mixco: Option<MixcoMeta>,
}

/// Draw order: timesteps, then noise matrices, then (optionally) the mixing
/// permutation and coefficients. Mixing is skipped for batches of one.
pub fn draw_batch(
    batch: usize,
    tokens: usize,
    token_width: usize,
    schedule: &NoiseSchedule,
    mixco: bool,
    rng: &mut ChaCha8Rng,
) -> BatchDraws {
    let t = (0..batch)
        .map(|_| rng.gen_range(1..=schedule.timesteps()))
        .collect();
    let noise = (0..batch)
        .map(|_| standard_normal_like(tokens, token_width, rng))
        .collect();
    let mixco = (mixco && batch >= 2).then(|| draw_mixco(batch, rng));
    BatchDraws { t, noise, mixco }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub mse: f64,
    pub softclip: f64,
    pub refine: f64,
    pub total: f64,
}

/// Compute the combined objective over a batch and its gradient w.r.t.
/// every model parameter. `draws` carries all sampled quantities; with the
/// same draws the result is exactly reproducible, which the gradient check
/// relies on.
///
/// MSE and the denoising term run on unmixed samples and are averaged over
/// the batch; the contrastive term runs on mixed latents (when mixing
/// metadata is present) with blended soft labels, and is summed as written.
pub fn batch_loss_and_grad(
    model: &SemanticDecoder,
    samples: &[&SemanticSample],
    cfg: &SemanticLossConfig,
    schedule: &NoiseSchedule,
    draws: &BatchDraws,
) -> Result<(LossBreakdown, SemanticDecoder)> {
    let b = samples.len();
    if b == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    if draws.t.len() != b || draws.noise.len() != b {
        return Err(Error::Validation(format!(
            "batch draws sized for {} samples, batch has {b}",
            draws.t.len()
        )));
    }
    cfg.validate()?;
    let (tokens, width) = (model.config.tokens, model.config.token_width);
    let n_embed = model.config.embedding_dim();
    let mut grad = model.zeros_like();

    // Forward the shared path once per sample.
    let mut caches = Vec::with_capacity(b);
    let mut embeds: Vec<Array2<f64>> = Vec::with_capacity(b); // 1×N rows
    let mut targets_flat = Array2::zeros((b, n_embed));
    for (i, s) in samples.iter().enumerate() {
        if s.target.dim() != (tokens, width) {
            return Err(Error::Validation(format!(
                "target for clip {} has shape {:?}, expected {:?}",
                s.clip_id,
                s.target.dim(),
                (tokens, width)
            )));
        }
        let (e, cache) = model.embed_cached(&s.subject_id, &s.x)?;
        targets_flat.row_mut(i).assign(&flatten_row(&s.target).row(0));
        embeds.push(e);
        caches.push(cache);
    }

    // Per-sample gradient accumulator on the MLP output.
    let mut d_embed: Vec<Array2<f64>> = embeds
        .iter()
        .map(|e| Array2::zeros(e.raw_dim()))
        .collect();

    // MSE term, averaged over the batch.
    let mut mse_total = 0.0;
    for i in 0..b {
        let target_row = flatten_row(&samples[i].target);
        let (l, g) = mse_and_grad(&embeds[i], &target_row);
        mse_total += l / b as f64;
        d_embed[i] += &(&g / b as f64);
    }

    // Contrastive term.
    let mut mix_backprop: Option<(Vec<MlpCache>, Array2<f64>)> = None;
    let softclip_total;
    match &draws.mixco {
        Some(meta) => {
            // Mix the normalized latents, re-run the MLP, and blend labels.
            let mut latents = Array2::zeros((b, model.config.latent_dim));
            for (i, c) in caches.iter().enumerate() {
                latents.row_mut(i).assign(&c.xp.row(0));
            }
            let mixed = mix_rows(&latents, &meta.partner, &meta.alpha)?;
            let mut preds = Array2::zeros((b, n_embed));
            let mut mix_caches = Vec::with_capacity(b);
            for i in 0..b {
                let row = mixed.row(i).insert_axis(Axis(0)).to_owned();
                let (e, c) = model.mlp.forward(&row);
                preds.row_mut(i).assign(&e.row(0));
                mix_caches.push(c);
            }
            let (that, _) = normalize_rows_with_norms(&targets_flat);
            let q_base = softmax_rows(&(that.dot(&that.t()) / cfg.tau));
            let mut q = Array2::zeros((b, b));
            for i in 0..b {
                let a = meta.alpha[i];
                let own = q_base.row(i);
                let other = q_base.row(meta.partner[i]);
                for (o, (&x, &y)) in q.row_mut(i).iter_mut().zip(own.iter().zip(other.iter())) {
                    *o = a * x + (1.0 - a) * y;
                }
            }
            let (loss, dpreds) = softclip_parts(&preds, &targets_flat, cfg.tau, Some(&q));
            softclip_total = loss;
            mix_backprop = Some((mix_caches, dpreds));
        }
        None => {
            let mut preds = Array2::zeros((b, n_embed));
            for (i, e) in embeds.iter().enumerate() {
                preds.row_mut(i).assign(&e.row(0));
            }
            let (loss, dpreds) = softclip_parts(&preds, &targets_flat, cfg.tau, None);
            softclip_total = loss;
            for i in 0..b {
                let drow = dpreds.row(i).insert_axis(Axis(0)).to_owned();
                d_embed[i] += &(&drow * cfg.lambda_softclip);
            }
        }
    }

    // Denoising term, averaged over the batch; gradient flows through the
    // refiner and back into the conditioning embedding.
    let mut refine_total = 0.0;
    for i in 0..b {
        let cond = reshape_tokens(&embeds[i], tokens, width);
        let z_t = schedule.q_sample(&samples[i].target, &draws.noise[i], draws.t[i])?;
        let (out, rc) = model.refiner.forward(&z_t, draws.t[i], &cond)?;
        let (l, g) = mse_and_grad(&out, &samples[i].target);
        refine_total += l / b as f64;
        let dout = &g * (cfg.lambda_refine / b as f64);
        let (_dz, dcond) = model.refiner.backward(&rc, &dout, &mut grad.refiner);
        d_embed[i] += &flatten_row(&dcond);
    }

    // Backprop the shared path. Mixed-sample gradients route through the
    // mixing weights into each participant's latent.
    let mut d_latent_extra: Vec<Array2<f64>> = (0..b)
        .map(|_| Array2::zeros((1, model.config.latent_dim)))
        .collect();
    if let (Some((mix_caches, dpreds)), Some(meta)) = (&mix_backprop, &draws.mixco) {
        for i in 0..b {
            let drow = dpreds.row(i).insert_axis(Axis(0)).to_owned() * cfg.lambda_softclip;
            let dmixed = model.mlp.backward(&mix_caches[i], &drow, &mut grad.mlp);
            d_latent_extra[i] += &(&dmixed * meta.alpha[i]);
            d_latent_extra[meta.partner[i]] += &(&dmixed * (1.0 - meta.alpha[i]));
        }
    }
    for i in 0..b {
        let dxp = model.mlp.backward(&caches[i].mlp, &d_embed[i], &mut grad.mlp)
            + &d_latent_extra[i];
        let dh = model
            .input_norm
            .backward(&caches[i].ln, &dxp, &mut grad.input_norm);
        let subject = &samples[i].subject_id;
        let proj = model.projector(subject)?;
        let gproj = grad
            .projectors
            .get_mut(subject)
            .expect("gradient mirrors model subjects");
        proj.backward(&caches[i].x_row, &dh, gproj);
    }

    let breakdown = LossBreakdown {
        mse: mse_total,
        softclip: softclip_total,
        refine: refine_total,
        total: total_loss(mse_total, softclip_total, refine_total, cfg),
    };
    Ok((breakdown, grad))
}

/// Loss only; gradients are computed and discarded.
pub fn batch_loss(
    model: &SemanticDecoder,
    samples: &[&SemanticSample],
    cfg: &SemanticLossConfig,
    schedule: &NoiseSchedule,
    draws: &BatchDraws,
) -> Result<LossBreakdown> {
    batch_loss_and_grad(model, samples, cfg, schedule, draws).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{assign_params, central_difference, flatten_params, max_gradient_rel_error};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tiny_config() -> SemanticModelConfig {
        SemanticModelConfig {
            latent_dim: 16,
            hidden: vec![16],
            tokens: 4,
            token_width: 6,
            refiner: RefinerConfig {
                layers: 1,
                heads: 2,
                head_dim: 3,
            },
        }
    }

    fn tiny_decoder(subjects: &[(&str, usize)], seed: u64) -> SemanticDecoder {
        let dims: BTreeMap<String, usize> = subjects
            .iter()
            .map(|(s, d)| (s.to_string(), *d))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SemanticDecoder::new("anchor", &dims, tiny_config(), &mut rng).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0))
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn embed_has_token_shape_for_every_subject() {
        let model = tiny_decoder(&[("sub0", 8), ("sub1", 11)], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (subject, dim) in [("sub0", 8), ("sub1", 11)] {
            let x = rand_vec(&mut rng, dim);
            let e = model.embed(subject, &x).unwrap();
            assert_eq!(e.dim(), (4, 6));
        }
        let x = rand_vec(&mut rng, 8);
        assert!(model.embed("sub9", &x).is_err(), "unregistered subject");
        assert!(model.embed("sub1", &x).is_err(), "dimension mismatch");
    }

    #[test]
    fn zeroed_parameters_give_zero_mlp_output() {
        let mut model = tiny_decoder(&[("sub0", 8)], 4);
        let n = crate::nn::param_count(&model);
        assign_params(&mut model, &vec![0.0; n]);
        let x = Array1::from_elem(8, 0.7);
        let e = model.embed("sub0", &x).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_and_predict_are_deterministic() {
        let model = tiny_decoder(&[("sub0", 8)], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_vec(&mut rng, 8);
        assert_eq!(model.embed("sub0", &x).unwrap(), model.embed("sub0", &x).unwrap());
        let schedule = NoiseSchedule::linear(4, 1e-4, 0.02).unwrap();
        let a = model
            .predict("sub0", &x, &schedule, &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        let b = model
            .predict("sub0", &x, &schedule, &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (4, 6));
    }

    #[test]
    fn mse_examples_and_loop_oracle() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = &a + 1.0;
        assert_abs_diff_eq!(mse_loss(&b, &a).unwrap(), 1.0, epsilon = 1e-15);
        assert!(mse_loss(&a, &array![[1.0, 2.0]]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = rand_mat(&mut rng, 5, 7);
        let t = rand_mat(&mut rng, 5, 7);
        let mut oracle = 0.0;
        for i in 0..5 {
            for j in 0..7 {
                let d = p[[i, j]] - t[[i, j]];
                oracle += d * d;
            }
        }
        oracle /= 35.0;
        assert_abs_diff_eq!(mse_loss(&p, &t).unwrap(), oracle, epsilon = 1e-6);
    }

    #[test]
    fn softclip_singleton_batch_is_zero() {
        let z = array![[0.3, -0.4, 0.5]];
        assert_abs_diff_eq!(softclip_loss(&z, &z, 0.07).unwrap(), 0.0, epsilon = 1e-12);
        let p = array![[9.0, 9.0, 9.0]];
        assert_abs_diff_eq!(softclip_loss(&p, &z, 0.07).unwrap(), 0.0, epsilon = 1e-12);
        assert!(softclip_loss(&z, &z, 0.0).is_err());
        assert!(softclip_loss(&z, &z, -1.0).is_err());
    }

    #[test]
    fn softclip_orthonormal_pair_matches_hand_value() {
        // Targets are orthonormal and preds equal targets with τ = 1: each
        // row's similarity is [1, 0] (in some order), both distributions are
        // σ([1,0]) = [e/(e+1), 1/(e+1)], and the loss is twice that
        // distribution's entropy.
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let loss = softclip_loss(&z, &z, 1.0).unwrap();
        assert_abs_diff_eq!(loss, 1.1644062177764358, epsilon = 1e-12);
    }

    #[test]
    fn softclip_self_prediction_equals_soft_label_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = rand_mat(&mut rng, 5, 9);
        let tau = 0.5;
        let loss = softclip_loss(&z, &z, tau).unwrap();
        // Oracle: with preds == targets both softmaxes coincide, so the loss
        // is the summed entropy of the soft label rows, computed here with
        // an independent scalar loop.
        let (that, _) = normalize_rows_with_norms(&z);
        let mut entropy = 0.0;
        for i in 0..5 {
            let mut logits = [0.0; 5];
            for j in 0..5 {
                logits[j] = that.row(i).dot(&that.row(j)) / tau;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let zsum: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for l in logits {
                let p = (l - m).exp() / zsum;
                entropy -= p * p.ln();
            }
        }
        assert_abs_diff_eq!(loss, entropy, epsilon = 1e-9);
    }

    #[test]
    fn softclip_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let targets = rand_mat(&mut rng, 3, 5);
        let preds = rand_mat(&mut rng, 3, 5);
        let (_, analytic) = softclip_parts(&preds, &targets, 0.3, None);
        let mut flat: Vec<f64> = preds.iter().copied().collect();
        let mut eval = |p: &[f64]| {
            let m = Array2::from_shape_vec((3, 5), p.to_vec()).unwrap();
            softclip_parts(&m, &targets, 0.3, None).0
        };
        let numeric = central_difference(&mut eval, &mut flat, 1e-6);
        let a: Vec<f64> = analytic.iter().copied().collect();
        assert!(max_gradient_rel_error(&a, &numeric) < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softclip_is_permutation_invariant(seed in 0u64..500, b in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds = rand_mat(&mut rng, b, 6);
            let targets = rand_mat(&mut rng, b, 6);
            let base = softclip_loss(&preds, &targets, 0.2).unwrap();
            // Rotate rows by one — a nontrivial simultaneous permutation.
            let rot = |m: &Array2<f64>| {
                let mut r = Array2::zeros(m.raw_dim());
                for i in 0..b {
                    r.row_mut(i).assign(&m.row((i + 1) % b));
                }
                r
            };
            let permuted = softclip_loss(&rot(&preds), &rot(&targets), 0.2).unwrap();
            prop_assert!((base - permuted).abs() < 1e-9);
        }

        #[test]
        fn softclip_ignores_positive_target_row_scaling(seed in 0u64..500, scale in 0.01f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds = rand_mat(&mut rng, 3, 6);
            let mut targets = rand_mat(&mut rng, 3, 6);
            let base = softclip_loss(&preds, &targets, 0.2).unwrap();
            targets.row_mut(1).mapv_inplace(|v| v * scale);
            let scaled = softclip_loss(&preds, &targets, 0.2).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
        }

        #[test]
        fn mse_is_symmetric(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_mat(&mut rng, 3, 4);
            let b = rand_mat(&mut rng, 3, 4);
            prop_assert_eq!(mse_loss(&a, &b).unwrap(), mse_loss(&b, &a).unwrap());
            prop_assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn mixed_rows_stay_between_the_pair(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = rand_mat(&mut rng, 4, 5);
            let (mixed, meta) = mixco_augment(&batch, &mut rng).unwrap();
            for i in 0..4 {
                for j in 0..5 {
                    let x = batch[[i, j]];
                    let y = batch[[meta.partner[i], j]];
                    let lo = x.min(y) - 1e-12;
                    let hi = x.max(y) + 1e-12;
                    prop_assert!(mixed[[i, j]] >= lo && mixed[[i, j]] <= hi);
                }
            }
        }
    }

    #[test]
    fn mix_formula_endpoints() {
        let batch = array![[0.0, 0.0], [2.0, 2.0]];
        let m = mix_rows(&batch, &[1, 0], &[1.0, 1.0]).unwrap();
        assert_eq!(m, batch);
        let m = mix_rows(&batch, &[1, 0], &[0.5, 0.5]).unwrap();
        assert_eq!(m, array![[1.0, 1.0], [1.0, 1.0]]);
        assert!(mix_rows(&batch, &[2, 0], &[0.5, 0.5]).is_err());
        assert!(mixco_augment(&array![[1.0]], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn mixing_coefficients_average_to_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let batch = Array2::zeros((10, 2));
        let mut sum = 0.0;
        let mut count = 0usize;
        for _ in 0..10_000 {
            let (_, meta) = mixco_augment(&batch, &mut rng).unwrap();
            sum += meta.alpha.iter().sum::<f64>();
            count += meta.alpha.len();
        }
        let mean = sum / count as f64;
        assert!((mean - 0.5).abs() < 0.01, "Beta(0.15,0.15) mean drifted: {mean}");
    }

    #[test]
    fn total_loss_weighting() {
        let cfg = SemanticLossConfig {
            lambda_refine: 0.5,
            lambda_softclip: 0.1,
            ..SemanticLossConfig::default()
        };
        assert_abs_diff_eq!(total_loss(3.0, 2.0, 1.0, &cfg), 3.7, epsilon = 1e-12);
        let off = SemanticLossConfig {
            lambda_refine: 0.0,
            lambda_softclip: 0.0,
            ..cfg
        };
        assert_eq!(total_loss(1.25, 9.0, 9.0, &off), 1.25);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &off), 0.0);
    }

    #[test]
    fn stubbed_denoiser_reaches_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = rand_mat(&mut rng, 3, 4);
        let noise = rand_mat(&mut rng, 3, 4);
        let schedule = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        // Denoiser that always returns the clean target: exact prediction.
        let clean = target.clone();
        let loss =
            denoised_target_mse(move |_, _| Ok(clean), &target, &schedule, 7, &noise).unwrap();
        assert_eq!(loss, 0.0);
        // Identity denoiser under a zero-noise single-step schedule: the
        // diffused input is already the clean target.
        let degenerate = NoiseSchedule::linear(1, 0.0, 0.0).unwrap();
        let loss =
            denoised_target_mse(|z, _| Ok(z.clone()), &target, &degenerate, 1, &noise).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn refine_loss_is_reproducible() {
        let model = tiny_decoder(&[("sub0", 8)], 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_vec(&mut rng, 8);
        let target = rand_mat(&mut rng, 4, 6);
        let schedule = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let a = refine_loss(&model, "sub0", &x, &target, &schedule, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = refine_loss(&model, "sub0", &x, &target, &schedule, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
    }

    /// The gradient check the module is built around: every parameter of the
    /// combined objective — projectors, norm, MLP, refiner — against central
    /// finite differences, with the mixed-sample contrastive path active.
    #[test]
    fn combined_loss_gradient_matches_finite_differences() {
        let model = tiny_decoder(&[("sub0", 8), ("sub1", 8)], 11);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let samples: Vec<SemanticSample> = (0..3)
            .map(|i| SemanticSample {
                subject_id: if i % 2 == 0 { "sub0" } else { "sub1" }.into(),
                clip_id: format!("clip{i}"),
                x: rand_vec(&mut rng, 8),
                target: rand_mat(&mut rng, 4, 6),
            })
            .collect();
        let refs: Vec<&SemanticSample> = samples.iter().collect();
        let cfg = SemanticLossConfig {
            lambda_refine: 0.5,
            lambda_softclip: 0.1,
            tau: 0.2,
            timesteps: 5,
            beta_start: 1e-4,
            beta_end: 0.02,
        };
        let schedule = cfg.schedule().unwrap();
        let draws = BatchDraws {
            t: vec![1, 3, 5],
            noise: (0..3).map(|_| rand_mat(&mut rng, 4, 6)).collect(),
            mixco: Some(MixcoMeta {
                partner: vec![2, 0, 1],
                alpha: vec![0.3, 0.85, 0.5],
            }),
        };

        let (_, grad) = batch_loss_and_grad(&model, &refs, &cfg, &schedule, &draws).unwrap();
        let analytic = flatten_params(&grad);
        let mut flat = flatten_params(&model);
        let mut eval = |p: &[f64]| {
            let mut m = model.clone();
            assign_params(&mut m, p);
            batch_loss(&m, &refs, &cfg, &schedule, &draws).unwrap().total
        };
        let numeric = central_difference(&mut eval, &mut flat, 1e-5);
        let err = max_gradient_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "gradient check failed: rel error {err}");
    }

    #[test]
    fn unmixed_gradient_also_matches_finite_differences() {
        let model = tiny_decoder(&[("sub0", 8)], 13);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let samples: Vec<SemanticSample> = (0..2)
            .map(|i| SemanticSample {
                subject_id: "sub0".into(),
                clip_id: format!("clip{i}"),
                x: rand_vec(&mut rng, 8),
                target: rand_mat(&mut rng, 4, 6),
            })
            .collect();
        let refs: Vec<&SemanticSample> = samples.iter().collect();
        let cfg = SemanticLossConfig {
            tau: 0.2,
            timesteps: 4,
            ..SemanticLossConfig::default()
        };
        let schedule = cfg.schedule().unwrap();
        let draws = BatchDraws {
            t: vec![2, 4],
            noise: (0..2).map(|_| rand_mat(&mut rng, 4, 6)).collect(),
            mixco: None,
        };
        let (_, grad) = batch_loss_and_grad(&model, &refs, &cfg, &schedule, &draws).unwrap();
        let analytic = flatten_params(&grad);
        let mut flat = flatten_params(&model);
        let mut eval = |p: &[f64]| {
            let mut m = model.clone();
            assign_params(&mut m, p);
            batch_loss(&m, &refs, &cfg, &schedule, &draws).unwrap().total
        };
        let numeric = central_difference(&mut eval, &mut flat, 1e-5);
        let err = max_gradient_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "gradient check failed: rel error {err}");
    }

    #[test]
    fn loss_breakdown_composes_total() {
        let model = tiny_decoder(&[("sub0", 8)], 15);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let sample = SemanticSample {
            subject_id: "sub0".into(),
            clip_id: "c".into(),
            x: rand_vec(&mut rng, 8),
            target: rand_mat(&mut rng, 4, 6),
        };
        let cfg = SemanticLossConfig {
            timesteps: 3,
            ..SemanticLossConfig::default()
        };
        let schedule = cfg.schedule().unwrap();
        let draws = BatchDraws {
            t: vec![2],
            noise: vec![rand_mat(&mut rng, 4, 6)],
            mixco: None,
        };
        let l = batch_loss(&model, &[&sample], &cfg, &schedule, &draws).unwrap();
        assert_abs_diff_eq!(
            l.total,
            total_loss(l.mse, l.softclip, l.refine, &cfg),
            epsilon = 1e-12
        );
        // Single-sample batch: contrastive term degenerates to zero.
        assert_abs_diff_eq!(l.softclip, 0.0, epsilon = 1e-12);
    }
}
