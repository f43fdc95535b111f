//! Staged conditional video rendering.
//!
//! The final inference step fuses the three decoded cue streams into pixels.
//! The order is fixed and auditable: every motion latent is decoded into a
//! blurry "motion frame" first, then the anchor embedding and the first
//! motion frame seed a text-to-image backend for the initial frame, and
//! finally a text-to-video backend extends that frame along the motion
//! sequence under holistic guidance, producing the requested number of
//! output frames.
//!
//! Generative backends are pluggable through [`RendererSuite`]. Two
//! implementations ship here: a dependency-free deterministic stub suite for
//! tests and desk-scale runs, and [`ExternalSuite`], which shells out to an
//! adapter process per stage (job description on stdin, produced tensor path
//! on stdout) so real generative models can be wired in without linking
//! them.

use std::cell::Cell;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use sha2::{Digest, Sha256};

use crate::error::{missing_as_validation, Error, Result};
use crate::motion::MotionLatentSeq;
use crate::tensor;

/// A video as a dense `[frames, height, width, 3]` RGB tensor with pixel
/// values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    pub frames: Array4<f32>,
}

impl VideoClip {
    pub fn validate(&self) -> Result<()> {
        let (n, h, w, c) = self.frames.dim();
        if self.clip_id.is_empty() {
            return Err(Error::Validation("video clip id must not be empty".into()));
        }
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Validation(format!(
                "video {} has empty dimensions {:?}",
                self.clip_id,
                self.frames.dim()
            )));
        }
        if c != 3 {
            return Err(Error::Validation(format!(
                "video {} must have 3 channels, found {c}",
                self.clip_id
            )));
        }
        if !self.frames.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "video {} has pixels outside [0, 1]",
                self.clip_id
            )));
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.frames.dim().0
    }

    /// Read a whole video from one rank-4 tensor file (the layout stimulus
    /// videos are stored in).
    pub fn load(path: &Path, clip_id: &str) -> Result<Self> {
        let raw = tensor::read_tensor(path)?;
        let frames = raw.into_dimensionality::<ndarray::Ix4>().map_err(|_| {
            Error::Validation(format!("{} is not a rank-4 video tensor", path.display()))
        })?;
        let clip = VideoClip { clip_id: clip_id.to_string(), frames };
        clip.validate()?;
        Ok(clip)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        tensor::write_tensor(path, &self.frames.clone().into_dyn())
    }
}

/// Everything one reconstruction needs: the two semantic embeddings, the
/// decoded motion latent sequence, and the output geometry.
#[derive(Debug, Clone)]
pub struct RenderJob {
    pub clip_id: String,
    /// Predicted anchor-level embedding, `[tokens, width]`.
    pub anchor: Array2<f64>,
    /// Predicted holistic-level embedding, `[tokens, width]`.
    pub holi: Array2<f64>,
    pub motion: MotionLatentSeq,
    /// Number of output frames; backends interpolate from the motion
    /// sequence length up (or down) to this.
    pub n_out: usize,
    pub height: usize,
    pub width: usize,
}

impl RenderJob {
    pub fn validate(&self) -> Result<()> {
        if self.clip_id.is_empty() {
            return Err(Error::Validation("render job clip id must not be empty".into()));
        }
        if self.motion.clip_id != self.clip_id {
            return Err(Error::Validation(format!(
                "render job for {} was given motion latents for {}",
                self.clip_id, self.motion.clip_id
            )));
        }
        self.motion.validate()?;
        for (name, e) in [("anchor", &self.anchor), ("holi", &self.holi)] {
            if e.is_empty() {
                return Err(Error::Validation(format!(
                    "render job {}: {name} embedding is empty",
                    self.clip_id
                )));
            }
            if !e.iter().all(|v| v.is_finite()) {
                return Err(Error::Validation(format!(
                    "render job {}: {name} embedding has non-finite values",
                    self.clip_id
                )));
            }
        }
        if self.n_out == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Validation(format!(
                "render job {}: output spec {}×{}×{} is degenerate",
                self.clip_id, self.n_out, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// One completed backend call, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderStage {
    /// Motion latent `frame` decoded to pixels.
    Vae { frame: usize },
    /// Initial frame synthesis from the anchor embedding.
    TextToImage,
    /// Full-sequence synthesis from the holistic embedding.
    TextToVideo,
}

impl fmt::Display for RenderStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RenderStage::Vae { frame } => write!(f, "vae[{frame}]"),
            RenderStage::TextToImage => write!(f, "t2i"),
            RenderStage::TextToVideo => write!(f, "t2v"),
        }
    }
}

/// The pluggable generative backends. Implementations must be deterministic
/// given their construction-time seed; `render` adds shape and finiteness
/// checks around every call, so implementations may assume valid inputs but
/// not valid outputs.
pub trait RendererSuite {
    /// Decode one motion latent `[c, lh, lw]` into an RGB frame
    /// `[height, width, 3]`.
    fn vae_decode(&self, latent: ArrayView3<f64>, height: usize, width: usize)
        -> Result<Array3<f32>>;

    /// Produce the initial reconstructed frame from the anchor embedding and
    /// the first motion frame.
    fn t2i(&self, anchor: &Array2<f64>, init_frame: &Array3<f32>) -> Result<Array3<f32>>;

    /// Extend the anchor frame along the motion-frame sequence under
    /// holistic guidance, yielding exactly `n_out` frames.
    fn t2v(
        &self,
        holi: &Array2<f64>,
        anchor_frame: &Array3<f32>,
        motion_frames: &[Array3<f32>],
        n_out: usize,
    ) -> Result<Vec<Array3<f32>>>;
}

/// A finished reconstruction together with its audit trail.
#[derive(Debug, Clone)]
pub struct RenderedClip {
    pub video: VideoClip,
    pub stage_log: Vec<RenderStage>,
}

/// Run the three-stage pipeline for one job.
pub fn render(job: &RenderJob, suite: &dyn RendererSuite) -> Result<RenderedClip> {
    let mut stage_log = Vec::new();
    let video = render_with_log(job, suite, &mut stage_log)?;
    Ok(RenderedClip { video, stage_log })
}

/// Like [`render`], but appends completed stages to a caller-owned log, so
/// the audit trail survives a mid-pipeline failure as the prefix of stages
/// that finished.
pub fn render_with_log(
    job: &RenderJob,
    suite: &dyn RendererSuite,
    log: &mut Vec<RenderStage>,
) -> Result<VideoClip> {
    job.validate()?;
    let n = job.motion.latents.dim().0;

    let mut motion_frames = Vec::with_capacity(n);
    for i in 0..n {
        let stage = RenderStage::Vae { frame: i };
        let latent = job.motion.latents.index_axis(Axis(0), i);
        let frame = suite.vae_decode(latent, job.height, job.width)?;
        motion_frames.push(admit_frame(frame, job, stage)?);
        log.push(stage);
    }

    let anchor_frame = suite.t2i(&job.anchor, &motion_frames[0])?;
    let anchor_frame = admit_frame(anchor_frame, job, RenderStage::TextToImage)?;
    log.push(RenderStage::TextToImage);

    let frames = suite.t2v(&job.holi, &anchor_frame, &motion_frames, job.n_out)?;
    if frames.len() != job.n_out {
        return Err(Error::Render {
            stage: RenderStage::TextToVideo.to_string(),
            detail: format!("returned {} frames, job wants {}", frames.len(), job.n_out),
        });
    }
    let mut out = Array4::zeros((job.n_out, job.height, job.width, 3));
    for (i, frame) in frames.into_iter().enumerate() {
        let frame = admit_frame(frame, job, RenderStage::TextToVideo)?;
        out.index_axis_mut(Axis(0), i).assign(&frame);
    }
    log.push(RenderStage::TextToVideo);

    Ok(VideoClip { clip_id: job.clip_id.clone(), frames: out })
}

/// Backend outputs are untrusted: verify the geometry, reject non-finite
/// pixels, and clamp the rest into `[0, 1]`.
fn admit_frame(frame: Array3<f32>, job: &RenderJob, stage: RenderStage) -> Result<Array3<f32>> {
    if frame.dim() != (job.height, job.width, 3) {
        return Err(Error::Render {
            stage: stage.to_string(),
            detail: format!(
                "frame shape {:?} does not match job spec {}×{}×3",
                frame.dim(),
                job.height,
                job.width
            ),
        });
    }
    if !frame.iter().all(|v| v.is_finite()) {
        return Err(Error::Render {
            stage: stage.to_string(),
            detail: "frame contains non-finite pixels".into(),
        });
    }
    Ok(frame.mapv(|v| v.clamp(0.0, 1.0)))
}

// ---------------------------------------------------------------------------
// Deterministic stub suite
// ---------------------------------------------------------------------------

/// Backend-free suite: the vae stage shifts latent channels back into pixel
/// range and nearest-upsamples, the t2i stage tints the first motion frame
/// with a color hashed from the anchor embedding, and the t2v stage linearly
/// interpolates from the anchor frame through the motion sequence.
#[derive(Debug, Clone)]
pub struct StubSuite {
    seed: u64,
}

/// How strongly the t2i stub's hash color tints the init frame.
const TINT: f32 = 0.25;

pub fn make_stub_suite(seed: u64) -> StubSuite {
    StubSuite { seed }
}

/// Three `[0, 1]` color components from a seeded hash of an embedding, so
/// different embeddings (or suite seeds) leave visibly different tints.
fn embed_color(seed: u64, embedding: &Array2<f64>) -> [f32; 3] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for v in embedding {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    [
        digest[0] as f32 / 255.0,
        digest[1] as f32 / 255.0,
        digest[2] as f32 / 255.0,
    ]
}

impl RendererSuite for StubSuite {
    fn vae_decode(
        &self,
        latent: ArrayView3<f64>,
        height: usize,
        width: usize,
    ) -> Result<Array3<f32>> {
        let (c, lh, lw) = latent.dim();
        if c == 0 || lh == 0 || lw == 0 {
            return Err(Error::Render {
                stage: "vae".into(),
                detail: format!("latent shape {:?} is degenerate", latent.dim()),
            });
        }
        // The first three channels map straight to RGB (a channel is reused
        // when there are fewer), shifted by the latent space's mid-gray
        // offset. Zero latents therefore decode to a flat mid-gray frame.
        Ok(Array3::from_shape_fn((height, width, 3), |(y, x, k)| {
            let ly = y * lh / height;
            let lx = x * lw / width;
            (latent[[k.min(c - 1), ly, lx]] + 0.5).clamp(0.0, 1.0) as f32
        }))
    }

    fn t2i(&self, anchor: &Array2<f64>, init_frame: &Array3<f32>) -> Result<Array3<f32>> {
        let color = embed_color(self.seed, anchor);
        Ok(Array3::from_shape_fn(init_frame.dim(), |(y, x, k)| {
            (1.0 - TINT) * init_frame[[y, x, k]] + TINT * color[k]
        }))
    }

    fn t2v(
        &self,
        _holi: &Array2<f64>,
        anchor_frame: &Array3<f32>,
        motion_frames: &[Array3<f32>],
        n_out: usize,
    ) -> Result<Vec<Array3<f32>>> {
        if motion_frames.is_empty() {
            return Err(Error::Render {
                stage: "t2v".into(),
                detail: "no motion frames supplied".into(),
            });
        }
        let n = motion_frames.len();
        let mut out = Vec::with_capacity(n_out);
        for j in 0..n_out {
            // Walk the motion sequence at constant speed while the anchor
            // frame's influence fades from one half to nothing.
            let (pos, beta) = if n_out == 1 {
                (0.0, 0.5f32)
            } else {
                let s = j as f64 / (n_out - 1) as f64;
                (s * (n - 1) as f64, 0.5 * (1.0 - s as f32))
            };
            let lo = pos.floor() as usize;
            let hi = pos.ceil().min((n - 1) as f64) as usize;
            let frac = (pos - lo as f64) as f32;
            let frame = Array3::from_shape_fn(anchor_frame.dim(), |(y, x, k)| {
                let m =
                    (1.0 - frac) * motion_frames[lo][[y, x, k]] + frac * motion_frames[hi][[y, x, k]];
                beta * anchor_frame[[y, x, k]] + (1.0 - beta) * m
            });
            out.push(frame);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// External adapter suite
// ---------------------------------------------------------------------------

/// Bridges to an out-of-process generative backend.
///
/// For each stage the adapter command is invoked as
/// `<command...> <stage> <exchange_dir>` with a JSON job description on
/// stdin:
///
/// ```json
/// {"stage": "vae", "seed": 7, "height": 28, "width": 28, "frame": 0,
///  "inputs": {"latent": "<path>"}, "output_dir": "<exchange_dir>"}
/// ```
///
/// Input tensors are written into the exchange directory in the shared
/// binary format before the call (`latent` rank-3 for vae; `anchor` and
/// `init_frame` for t2i; `holi`, `anchor_frame` and rank-4 `motion` for
/// t2v). The adapter must print the path of the tensor it produced as the
/// only non-empty line on stdout: rank-3 `[h, w, 3]` for vae and t2i, rank-4
/// `[n_out, h, w, 3]` for t2v. A non-zero exit reports the stage as failed
/// with the adapter's stderr attached.
pub struct ExternalSuite {
    command: Vec<String>,
    workdir: PathBuf,
    seed: u64,
    calls: Cell<u64>,
}

impl ExternalSuite {
    pub fn new(command: Vec<String>, workdir: impl Into<PathBuf>, seed: u64) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Config("external renderer command is empty".into()));
        }
        Ok(ExternalSuite { command, workdir: workdir.into(), seed, calls: Cell::new(0) })
    }

    /// Fresh per-call directory for exchanged tensors.
    fn exchange_dir(&self, stage: &str) -> Result<PathBuf> {
        let id = self.calls.get();
        self.calls.set(id + 1);
        let dir = self.workdir.join(format!("call_{id:06}_{stage}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn run(&self, stage: &str, dir: &Path, job: serde_json::Value) -> Result<PathBuf> {
        let fail = |detail: String| Error::Render { stage: stage.into(), detail };
        let mut cmd = Command::new(&self.command[0]);
        cmd.args(&self.command[1..])
            .arg(stage)
            .arg(dir)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        let mut child = cmd
            .spawn()
            .map_err(|e| fail(format!("failed to start {}: {e}", self.command[0])))?;
        {
            let stdin = child.stdin.as_mut().expect("stdin was piped");
            stdin
                .write_all(job.to_string().as_bytes())
                .and_then(|()| stdin.write_all(b"\n"))
                .map_err(|e| fail(format!("failed to send job: {e}")))?;
        }
        let out = child
            .wait_with_output()
            .map_err(|e| fail(format!("failed to wait for adapter: {e}")))?;
        if !out.status.success() {
            let stderr = String::from_utf8_lossy(&out.stderr);
            return Err(fail(format!(
                "adapter exited with {}: {}",
                out.status,
                stderr.trim().chars().take(400).collect::<String>()
            )));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let mut paths = stdout.lines().map(str::trim).filter(|l| !l.is_empty());
        let path = paths
            .next()
            .ok_or_else(|| fail("adapter printed no output tensor path".into()))?;
        if paths.next().is_some() {
            return Err(fail("adapter printed more than one output path".into()));
        }
        Ok(PathBuf::from(path))
    }
}

fn write_exchange_f64<D: ndarray::Dimension>(
    dir: &Path,
    name: &str,
    data: &ndarray::Array<f64, D>,
) -> Result<PathBuf> {
    let path = dir.join(format!("{name}.svt"));
    tensor::write_tensor(&path, &data.mapv(|v| v as f32).into_dyn())?;
    Ok(path)
}

fn write_exchange_f32<D: ndarray::Dimension>(
    dir: &Path,
    name: &str,
    data: &ndarray::Array<f32, D>,
) -> Result<PathBuf> {
    let path = dir.join(format!("{name}.svt"));
    tensor::write_tensor(&path, &data.clone().into_dyn())?;
    Ok(path)
}

fn read_exchange(path: &Path, stage: &str, rank: usize) -> Result<ndarray::ArrayD<f32>> {
    let raw = tensor::read_tensor(path).map_err(|e| Error::Render {
        stage: stage.into(),
        detail: format!("could not read adapter output {}: {e}", path.display()),
    })?;
    if raw.ndim() != rank {
        return Err(Error::Render {
            stage: stage.into(),
            detail: format!("adapter output has rank {}, expected {rank}", raw.ndim()),
        });
    }
    Ok(raw)
}

impl RendererSuite for ExternalSuite {
    fn vae_decode(
        &self,
        latent: ArrayView3<f64>,
        height: usize,
        width: usize,
    ) -> Result<Array3<f32>> {
        let dir = self.exchange_dir("vae")?;
        let latent_path = write_exchange_f64(&dir, "latent", &latent.to_owned())?;
        let job = serde_json::json!({
            "stage": "vae",
            "seed": self.seed,
            "height": height,
            "width": width,
            "inputs": {"latent": latent_path},
            "output_dir": dir,
        });
        let out = self.run("vae", &dir, job)?;
        let arr = read_exchange(&out, "vae", 3)?;
        Ok(arr.into_dimensionality().expect("rank checked above"))
    }

    fn t2i(&self, anchor: &Array2<f64>, init_frame: &Array3<f32>) -> Result<Array3<f32>> {
        let dir = self.exchange_dir("t2i")?;
        let anchor_path = write_exchange_f64(&dir, "anchor", anchor)?;
        let init_path = write_exchange_f32(&dir, "init_frame", init_frame)?;
        let job = serde_json::json!({
            "stage": "t2i",
            "seed": self.seed,
            "inputs": {"anchor": anchor_path, "init_frame": init_path},
            "output_dir": dir,
        });
        let out = self.run("t2i", &dir, job)?;
        let arr = read_exchange(&out, "t2i", 3)?;
        Ok(arr.into_dimensionality().expect("rank checked above"))
    }

    fn t2v(
        &self,
        holi: &Array2<f64>,
        anchor_frame: &Array3<f32>,
        motion_frames: &[Array3<f32>],
        n_out: usize,
    ) -> Result<Vec<Array3<f32>>> {
        let dir = self.exchange_dir("t2v")?;
        let holi_path = write_exchange_f64(&dir, "holi", holi)?;
        let anchor_path = write_exchange_f32(&dir, "anchor_frame", anchor_frame)?;
        let (h, w, _) = anchor_frame.dim();
        let mut motion = Array4::zeros((motion_frames.len(), h, w, 3));
        for (i, f) in motion_frames.iter().enumerate() {
            motion.index_axis_mut(Axis(0), i).assign(f);
        }
        let motion_path = write_exchange_f32(&dir, "motion", &motion)?;
        let job = serde_json::json!({
            "stage": "t2v",
            "seed": self.seed,
            "n_out": n_out,
            "inputs": {
                "holi": holi_path,
                "anchor_frame": anchor_path,
                "motion": motion_path,
            },
            "output_dir": dir,
        });
        let out = self.run("t2v", &dir, job)?;
        let arr = read_exchange(&out, "t2v", 4)?;
        let video = arr
            .into_dimensionality::<ndarray::Ix4>()
            .expect("rank checked above");
        Ok((0..video.dim().0)
            .map(|i| video.index_axis(Axis(0), i).to_owned())
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Store a rendered clip as one rank-3 tensor per frame under
/// `dir/<clip_id>/frame_NNN.svt`.
pub fn save_rendered(dir: &Path, clip: &VideoClip) -> Result<()> {
    clip.validate()?;
    let clip_dir = dir.join(&clip.clip_id);
    std::fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    for i in 0..clip.n_frames() {
        let frame = clip.frames.index_axis(Axis(0), i).to_owned();
        tensor::write_tensor(&clip_dir.join(frame_name(i)), &frame.into_dyn())?;
    }
    Ok(())
}

/// Load a clip previously written by [`save_rendered`]; frames must be
/// contiguous from zero.
pub fn load_rendered(dir: &Path, clip_id: &str) -> Result<VideoClip> {
    let clip_dir = dir.join(clip_id);
    let first_path = clip_dir.join(frame_name(0));
    if !first_path.exists() {
        return Err(Error::Validation(format!(
            "no rendered frames for clip {clip_id} under {}",
            dir.display()
        )));
    }
    let first = tensor::read_tensor(&first_path)?;
    let (h, w) = {
        let d = first.shape();
        if first.ndim() != 3 || d[2] != 3 {
            return Err(Error::Validation(format!(
                "{} frame 0 is not a [h, w, 3] tensor",
                clip_dir.display()
            )));
        }
        (d[0], d[1])
    };
    let mut frames = vec![first];
    loop {
        let path = clip_dir.join(frame_name(frames.len()));
        if !path.exists() {
            break;
        }
        let f = tensor::read_tensor(&path)?;
        if f.shape() != [h, w, 3] {
            return Err(Error::Validation(format!(
                "{}: frame {} shape {:?} differs from frame 0",
                clip_dir.display(),
                frames.len(),
                f.shape()
            )));
        }
        frames.push(f);
    }
    let mut out = Array4::zeros((frames.len(), h, w, 3));
    for (i, f) in frames.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .assign(&f.into_dimensionality::<ndarray::Ix3>().expect("shape checked"));
    }
    let clip = VideoClip { clip_id: clip_id.to_string(), frames: out };
    clip.validate()?;
    Ok(clip)
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:03}.svt")
}

pub const RENDER_MANIFEST_HEADER: &str = "semvideo-renders 1";

/// One line per rendered clip in the render manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderManifestEntry {
    pub clip_id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl RenderManifestEntry {
    pub fn of(clip: &VideoClip) -> Self {
        let (n, h, w, _) = clip.frames.dim();
        RenderManifestEntry { clip_id: clip.clip_id.clone(), frames: n, height: h, width: w }
    }
}

pub fn save_render_manifest(path: &Path, entries: &[RenderManifestEntry]) -> Result<()> {
    let mut text = format!("{RENDER_MANIFEST_HEADER}\n");
    for e in entries {
        text.push_str(&format!("{} {} {} {}\n", e.clip_id, e.frames, e.height, e.width));
    }
    tensor::atomic_write(path, text.as_bytes())
}

pub fn load_render_manifest(path: &Path) -> Result<Vec<RenderManifestEntry>> {
    let text = missing_as_validation(std::fs::read_to_string(path), path)?;
    let mut lines = text.lines();
    if lines.next() != Some(RENDER_MANIFEST_HEADER) {
        return Err(Error::Validation(format!(
            "{} is not a render manifest (expected header {RENDER_MANIFEST_HEADER:?})",
            path.display()
        )));
    }
    let mut entries = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || {
            Error::Validation(format!(
                "{} line {}: expected `clip frames height width`",
                path.display(),
                no + 2
            ))
        };
        if parts.len() != 4 {
            return Err(bad());
        }
        entries.push(RenderManifestEntry {
            clip_id: parts[0].to_string(),
            frames: parts[1].parse().map_err(|_| bad())?,
            height: parts[2].parse().map_err(|_| bad())?,
            width: parts[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(entries)
}

/// Write one frame as a binary portable pixmap (P6, 8 bits per channel) for
/// quick visual inspection without any image tooling.
pub fn export_ppm(frame: ArrayView3<f32>, path: &Path) -> Result<()> {
    let (h, w, c) = frame.dim();
    if c != 3 {
        return Err(Error::Validation(format!(
            "ppm export needs an RGB frame, found {c} channels"
        )));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                bytes.push((frame[[y, x, k]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    tensor::atomic_write(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    fn test_job(seed: u64, frames: usize, n_out: usize) -> RenderJob {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latents =
            Array4::from_shape_fn((frames, 2, 4, 4), |_| rng.gen_range(-0.5..0.5));
        RenderJob {
            clip_id: "clipA".into(),
            anchor: Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0)),
            holi: Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0)),
            motion: MotionLatentSeq { clip_id: "clipA".into(), latents },
            n_out,
            height: 8,
            width: 8,
        }
    }

    #[test]
    fn zero_latents_decode_to_the_bias_frame() {
        let suite = make_stub_suite(0);
        let zero = Array3::<f64>::zeros((4, 2, 2));
        let frame = suite.vae_decode(zero.view(), 6, 6).unwrap();
        assert!(frame.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn vae_stub_upsamples_nearest_and_maps_channels() {
        let suite = make_stub_suite(0);
        let mut latent = Array3::<f64>::zeros((2, 2, 2));
        latent[[0, 0, 0]] = 0.3; // top-left red
        latent[[1, 1, 1]] = -0.2; // bottom-right green
        let frame = suite.vae_decode(latent.view(), 4, 4).unwrap();
        // Top-left quadrant: red channel lifted.
        assert!((frame[[0, 0, 0]] - 0.8).abs() < 1e-6);
        assert!((frame[[1, 1, 0]] - 0.8).abs() < 1e-6);
        assert!((frame[[0, 0, 1]] - 0.5).abs() < 1e-6);
        // Bottom-right quadrant: green channel lowered; blue reuses the last
        // channel when there are fewer latent channels than colors.
        assert!((frame[[3, 3, 1]] - 0.3).abs() < 1e-6);
        assert!((frame[[3, 3, 2]] - 0.3).abs() < 1e-6);
        assert!((frame[[3, 3, 0]] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn stage_log_is_vae_per_frame_then_t2i_then_t2v() {
        let job = test_job(1, 3, 5);
        let out = render(&job, &make_stub_suite(9)).unwrap();
        let expect = vec![
            RenderStage::Vae { frame: 0 },
            RenderStage::Vae { frame: 1 },
            RenderStage::Vae { frame: 2 },
            RenderStage::TextToImage,
            RenderStage::TextToVideo,
        ];
        assert_eq!(out.stage_log, expect);
        assert_eq!(format!("{}", out.stage_log[0]), "vae[0]");
        assert_eq!(format!("{}", out.stage_log[4]), "t2v");
        assert_eq!(out.video.n_frames(), 5);
        assert_eq!(out.video.frames.dim(), (5, 8, 8, 3));
    }

    /// Suite wrapper that records what reaches the t2v stage and can be told
    /// to fail there or to ignore motion entirely.
    struct Probe {
        inner: StubSuite,
        seen_motion: RefCell<Vec<Array3<f32>>>,
        mode: ProbeMode,
    }

    enum ProbeMode {
        Delegate,
        RepeatAnchor,
        FailT2v,
    }

    impl Probe {
        fn new(mode: ProbeMode) -> Self {
            Probe { inner: make_stub_suite(4), seen_motion: RefCell::new(Vec::new()), mode }
        }
    }

    impl RendererSuite for Probe {
        fn vae_decode(
            &self,
            latent: ArrayView3<f64>,
            height: usize,
            width: usize,
        ) -> Result<Array3<f32>> {
            self.inner.vae_decode(latent, height, width)
        }
        fn t2i(&self, anchor: &Array2<f64>, init_frame: &Array3<f32>) -> Result<Array3<f32>> {
            self.inner.t2i(anchor, init_frame)
        }
        fn t2v(
            &self,
            holi: &Array2<f64>,
            anchor_frame: &Array3<f32>,
            motion_frames: &[Array3<f32>],
            n_out: usize,
        ) -> Result<Vec<Array3<f32>>> {
            *self.seen_motion.borrow_mut() = motion_frames.to_vec();
            match self.mode {
                ProbeMode::Delegate => self.inner.t2v(holi, anchor_frame, motion_frames, n_out),
                ProbeMode::RepeatAnchor => Ok(vec![anchor_frame.clone(); n_out]),
                ProbeMode::FailT2v => Err(Error::Render {
                    stage: "t2v".into(),
                    detail: "backend crashed".into(),
                }),
            }
        }
    }

    #[test]
    fn changing_one_latent_changes_only_that_motion_frame() {
        let job_a = test_job(2, 4, 4);
        let mut job_b = job_a.clone();
        for v in job_b.motion.latents.index_axis_mut(Axis(0), 2).iter_mut() {
            *v += 0.05;
        }
        let probe_a = Probe::new(ProbeMode::Delegate);
        let probe_b = Probe::new(ProbeMode::Delegate);
        render(&job_a, &probe_a).unwrap();
        render(&job_b, &probe_b).unwrap();
        let a = probe_a.seen_motion.borrow();
        let b = probe_b.seen_motion.borrow();
        for i in 0..4 {
            if i == 2 {
                assert_ne!(a[i], b[i]);
            } else {
                assert_eq!(a[i], b[i]);
            }
        }
    }

    #[test]
    fn repeat_anchor_backend_yields_identical_frames_equal_to_t2i_output() {
        let job = test_job(3, 2, 6);
        let probe = Probe::new(ProbeMode::RepeatAnchor);
        let out = render(&job, &probe).unwrap();
        // Reconstruct what the t2i stub must have produced.
        let suite = make_stub_suite(4);
        let first_latent = job.motion.latents.index_axis(Axis(0), 0);
        let init = suite.vae_decode(first_latent, 8, 8).unwrap();
        let anchor_frame = suite.t2i(&job.anchor, &init).unwrap();
        for i in 0..6 {
            assert_eq!(out.video.frames.index_axis(Axis(0), i), anchor_frame.view());
        }
    }

    #[test]
    fn failed_stage_is_named_and_log_keeps_the_finished_prefix() {
        let job = test_job(5, 3, 4);
        let probe = Probe::new(ProbeMode::FailT2v);
        let mut log = Vec::new();
        let err = render_with_log(&job, &probe, &mut log).unwrap_err();
        match &err {
            Error::Render { stage, .. } => assert_eq!(stage, "t2v"),
            other => panic!("expected render error, got {other:?}"),
        }
        assert_eq!(err.exit_code(), 1);
        let expect = vec![
            RenderStage::Vae { frame: 0 },
            RenderStage::Vae { frame: 1 },
            RenderStage::Vae { frame: 2 },
            RenderStage::TextToImage,
        ];
        assert_eq!(log, expect);
    }

    #[test]
    fn same_seed_renders_byte_identical_videos() {
        let job = test_job(6, 3, 7);
        let a = render(&job, &make_stub_suite(11)).unwrap();
        let b = render(&job, &make_stub_suite(11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        a.video.save(&dir.path().join("a.svt")).unwrap();
        b.video.save(&dir.path().join("b.svt")).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("a.svt")).unwrap(),
            std::fs::read(dir.path().join("b.svt")).unwrap()
        );
        // A different suite seed tints the anchor frame differently.
        let c = render(&job, &make_stub_suite(12)).unwrap();
        assert_ne!(a.video.frames, c.video.frames);
    }

    #[test]
    fn matched_output_length_correlates_frames_with_their_motion_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 4;
        // Make the motion frames strongly distinct.
        let latents = Array4::from_shape_fn((n, 2, 4, 4), |(f, c, y, x)| {
            0.4 * ((f * 13 + c * 5 + y * 3 + x) as f64 * 1.7).sin() + rng.gen_range(-0.05..0.05)
        });
        let job = RenderJob {
            clip_id: "c".into(),
            anchor: Array2::from_elem((2, 3), 0.1),
            holi: Array2::from_elem((2, 3), -0.2),
            motion: MotionLatentSeq { clip_id: "c".into(), latents },
            n_out: n,
            height: 8,
            width: 8,
        };
        let suite = make_stub_suite(2);
        let out = render(&job, &suite).unwrap();
        let motion: Vec<Array1<f32>> = (0..n)
            .map(|i| {
                let lat = job.motion.latents.index_axis(Axis(0), i);
                Array1::from_iter(suite.vae_decode(lat, 8, 8).unwrap().into_iter())
            })
            .collect();
        let centered = |v: &Array1<f32>| {
            let m = v.mean().unwrap();
            v.mapv(|x| x - m)
        };
        for i in 0..n {
            let oi = centered(&Array1::from_iter(
                out.video.frames.index_axis(Axis(0), i).iter().copied(),
            ));
            let corr = |m: &Array1<f32>| {
                let mc = centered(m);
                oi.dot(&mc) / (oi.dot(&oi).sqrt() * mc.dot(&mc).sqrt()).max(1e-12)
            };
            let own = corr(&motion[i]);
            for (j, m) in motion.iter().enumerate() {
                if j != i {
                    assert!(
                        own > corr(m),
                        "frame {i}: corr with own motion {own} not above frame {j} ({})",
                        corr(m)
                    );
                }
            }
        }
    }

    #[test]
    fn job_validation_rejects_missing_or_mismatched_inputs() {
        let good = test_job(10, 2, 3);
        assert!(good.validate().is_ok());

        let mut bad = good.clone();
        bad.anchor = Array2::zeros((0, 4));
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);

        let mut bad = good.clone();
        bad.motion.clip_id = "other".into();
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);

        let mut bad = good.clone();
        bad.n_out = 0;
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);

        let mut bad = good.clone();
        bad.holi[[0, 0]] = f64::NAN;
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn single_output_frame_renders() {
        let job = test_job(12, 3, 1);
        let out = render(&job, &make_stub_suite(1)).unwrap();
        assert_eq!(out.video.n_frames(), 1);
        assert!(out.video.frames.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    fn write_adapter_script(dir: &Path, body: &str) -> PathBuf {
        use std::os::unix::fs::PermissionsExt;
        let path = dir.join("adapter.sh");
        std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
        let mut perm = std::fs::metadata(&path).unwrap().permissions();
        perm.set_mode(0o755);
        std::fs::set_permissions(&path, perm).unwrap();
        path
    }

    /// Pre-render stage outputs an adapter script can answer with.
    fn canned_outputs(dir: &Path, job: &RenderJob) {
        let frame = Array3::<f32>::from_elem((job.height, job.width, 3), 0.25);
        tensor::write_tensor(&dir.join("vae_out.svt"), &frame.clone().into_dyn()).unwrap();
        tensor::write_tensor(&dir.join("t2i_out.svt"), &frame.mapv(|v| v + 0.25).into_dyn())
            .unwrap();
        let video =
            Array4::<f32>::from_elem((job.n_out, job.height, job.width, 3), 0.75);
        tensor::write_tensor(&dir.join("t2v_out.svt"), &video.into_dyn()).unwrap();
    }

    #[test]
    fn external_adapter_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let job = test_job(20, 2, 3);
        canned_outputs(dir.path(), &job);
        let script = write_adapter_script(
            dir.path(),
            &format!(
                "stage=$1\noutdir=$2\ncat > \"$outdir/job.json\"\ncp {}/${{stage}}_out.svt \"$outdir/answer.svt\"\necho \"$outdir/answer.svt\"",
                dir.path().display()
            ),
        );
        let suite = ExternalSuite::new(
            vec![script.display().to_string()],
            dir.path().join("exchange"),
            77,
        )
        .unwrap();
        let out = render(&job, &suite).unwrap();
        assert_eq!(out.video.frames.dim(), (3, 8, 8, 3));
        assert!(out.video.frames.iter().all(|&v| (v - 0.75).abs() < 1e-6));
        assert_eq!(out.stage_log.len(), 2 + 1 + 1);

        // The adapter really saw the job descriptions and the referenced
        // input tensors exist on disk.
        let vae_job: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("exchange/call_000000_vae/job.json"))
                .unwrap(),
        )
        .unwrap();
        assert_eq!(vae_job["stage"], "vae");
        assert_eq!(vae_job["seed"], 77);
        let latent_path = PathBuf::from(vae_job["inputs"]["latent"].as_str().unwrap());
        assert!(latent_path.exists());
        let t2v_job: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("exchange/call_000003_t2v/job.json"))
                .unwrap(),
        )
        .unwrap();
        assert_eq!(t2v_job["n_out"], 3);
        assert!(PathBuf::from(t2v_job["inputs"]["motion"].as_str().unwrap()).exists());
    }

    #[test]
    fn external_adapter_failure_names_stage_and_keeps_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let job = test_job(21, 2, 3);
        canned_outputs(dir.path(), &job);
        let script = write_adapter_script(
            dir.path(),
            &format!(
                "stage=$1\noutdir=$2\ncat > /dev/null\nif [ \"$stage\" = t2v ]; then echo 'gpu on fire' >&2; exit 3; fi\ncp {}/${{stage}}_out.svt \"$outdir/answer.svt\"\necho \"$outdir/answer.svt\"",
                dir.path().display()
            ),
        );
        let suite = ExternalSuite::new(
            vec![script.display().to_string()],
            dir.path().join("exchange"),
            0,
        )
        .unwrap();
        let mut log = Vec::new();
        let err = render_with_log(&job, &suite, &mut log).unwrap_err();
        match &err {
            Error::Render { stage, detail } => {
                assert_eq!(stage, "t2v");
                assert!(detail.contains("gpu on fire"), "detail: {detail}");
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert_eq!(
            log,
            vec![
                RenderStage::Vae { frame: 0 },
                RenderStage::Vae { frame: 1 },
                RenderStage::TextToImage,
            ]
        );
    }

    #[test]
    fn external_adapter_wrong_rank_is_a_stage_error() {
        let dir = tempfile::tempdir().unwrap();
        let job = test_job(22, 1, 2);
        // Answer every stage with a rank-1 tensor.
        let bogus = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[5]));
        tensor::write_tensor(&dir.path().join("bogus.svt"), &bogus).unwrap();
        let script = write_adapter_script(
            dir.path(),
            &format!("cat > /dev/null\necho {}/bogus.svt", dir.path().display()),
        );
        let suite = ExternalSuite::new(
            vec![script.display().to_string()],
            dir.path().join("exchange"),
            0,
        )
        .unwrap();
        let err = render(&job, &suite).unwrap_err();
        match &err {
            Error::Render { stage, detail } => {
                assert_eq!(stage, "vae");
                assert!(detail.contains("rank"), "detail: {detail}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rendered_clip_roundtrips_through_per_frame_files() {
        let job = test_job(30, 2, 4);
        let out = render(&job, &make_stub_suite(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_rendered(dir.path(), &out.video).unwrap();
        assert!(dir.path().join("clipA/frame_000.svt").exists());
        assert!(dir.path().join("clipA/frame_003.svt").exists());
        let back = load_rendered(dir.path(), "clipA").unwrap();
        assert_eq!(back, out.video);

        let err = load_rendered(dir.path(), "missing").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn render_manifest_roundtrips_and_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        let entries = vec![
            RenderManifestEntry { clip_id: "a".into(), frames: 12, height: 28, width: 28 },
            RenderManifestEntry { clip_id: "b".into(), frames: 6, height: 14, width: 14 },
        ];
        save_render_manifest(&path, &entries).unwrap();
        assert_eq!(load_render_manifest(&path).unwrap(), entries);

        std::fs::write(&path, "something else\n").unwrap();
        assert_eq!(load_render_manifest(&path).unwrap_err().exit_code(), 2);
        std::fs::remove_file(&path).unwrap();
        assert_eq!(load_render_manifest(&path).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn ppm_export_writes_exact_bytes() {
        let mut frame = Array3::<f32>::zeros((1, 2, 3));
        frame[[0, 0, 0]] = 1.0; // red pixel
        frame[[0, 1, 1]] = 0.5; // half green pixel — rounds to 128
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.ppm");
        export_ppm(frame.view(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expect = b"P6\n2 1\n255\n".to_vec();
        expect.extend_from_slice(&[255, 0, 0, 0, 128, 0]);
        assert_eq!(bytes, expect);
    }

    #[test]
    fn video_clip_single_file_roundtrip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let clip = VideoClip {
            clip_id: "v".into(),
            frames: Array4::from_shape_fn((2, 3, 3, 3), |_| rng.gen_range(0.0f32..1.0)),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.svt");
        clip.save(&path).unwrap();
        assert_eq!(VideoClip::load(&path, "v").unwrap(), clip);

        let bad = VideoClip { clip_id: "v".into(), frames: Array4::from_elem((1, 2, 2, 3), 1.5) };
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
        let bad = VideoClip { clip_id: "v".into(), frames: Array4::zeros((1, 2, 2, 4)) };
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// Any well-formed job renders deterministically to n_out in-range
        /// frames with the canonical stage sequence.
        #[test]
        fn stub_render_is_total_and_in_range(
            seed in 0u64..1000,
            frames in 1usize..4,
            n_out in 1usize..8,
        ) {
            let job = test_job(seed, frames, n_out);
            let a = render(&job, &make_stub_suite(seed)).unwrap();
            let b = render(&job, &make_stub_suite(seed)).unwrap();
            prop_assert_eq!(&a.video.frames, &b.video.frames);
            prop_assert_eq!(a.video.n_frames(), n_out);
            prop_assert!(a.video.frames.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(a.stage_log.len(), frames + 2);
            for (i, s) in a.stage_log.iter().enumerate() {
                let expect = if i < frames {
                    RenderStage::Vae { frame: i }
                } else if i == frames {
                    RenderStage::TextToImage
                } else {
                    RenderStage::TextToVideo
                };
                prop_assert_eq!(*s, expect);
            }
        }
    }
}
