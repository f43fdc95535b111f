//! Hierarchical caption mining over a pluggable multimodal language model,
//! plus caption analytics (token statistics, BLEU/ROUGE similarity).
//!
//! Mining runs in two stages per clip. Stage 1 asks the model for a short
//! core-event summary (the *basic* caption, capped at twenty words). Stage 2
//! issues three specialized prompts — first-frame appearance (*anchor*),
//! dynamics (*motion*), and a whole-clip summary (*holi*) — each carrying the
//! basic caption inside the prompt so the model stays anchored to the same
//! event. The model itself sits behind [`MllmClient`], with deterministic
//! mocks for tests and an HTTP implementation for real deployments.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::data::manifest::DatasetManifest;
use crate::data::VideoClip;
use crate::error::{missing_as_validation, Error, Result};
use crate::tensor::atomic_write;

/// Hard cap on the basic caption, in whitespace words.
pub const MAX_BASIC_WORDS: usize = 20;

/// Slot marker that stage-2 templates must contain exactly once.
pub const BASIC_SLOT: &str = "{basic_caption}";

/// The four caption levels, in mining order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CaptionLevel {
    Basic,
    Anchor,
    Motion,
    Holi,
}

impl CaptionLevel {
    pub const ALL: [CaptionLevel; 4] = [
        CaptionLevel::Basic,
        CaptionLevel::Anchor,
        CaptionLevel::Motion,
        CaptionLevel::Holi,
    ];

    /// The stage-2 levels, in the order their prompts are issued.
    pub const STAGE_TWO: [CaptionLevel; 3] =
        [CaptionLevel::Anchor, CaptionLevel::Motion, CaptionLevel::Holi];

    pub fn name(self) -> &'static str {
        match self {
            CaptionLevel::Basic => "basic",
            CaptionLevel::Anchor => "anchor",
            CaptionLevel::Motion => "motion",
            CaptionLevel::Holi => "holi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(CaptionLevel::Basic),
            "anchor" => Ok(CaptionLevel::Anchor),
            "motion" => Ok(CaptionLevel::Motion),
            "holi" => Ok(CaptionLevel::Holi),
            other => Err(Error::Validation(format!(
                "unknown caption level {other:?} (expected basic, anchor, motion, or holi)"
            ))),
        }
    }
}

impl fmt::Display for CaptionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A prompt template for one caption level.
///
/// The basic template is sent verbatim; stage-2 templates must contain
/// [`BASIC_SLOT`] exactly once, which [`PromptTemplate::render`] replaces
/// with the stage-1 caption.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub level: CaptionLevel,
    text: String,
}

impl PromptTemplate {
    pub fn new(level: CaptionLevel, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let slots = text.matches(BASIC_SLOT).count();
        match (level, slots) {
            (CaptionLevel::Basic, 0) => {}
            (CaptionLevel::Basic, n) => {
                return Err(Error::Validation(format!(
                    "basic template must not contain {BASIC_SLOT}, found {n}"
                )))
            }
            (_, 1) => {}
            (level, n) => {
                return Err(Error::Validation(format!(
                    "{level} template must contain {BASIC_SLOT} exactly once, found {n}"
                )))
            }
        }
        Ok(PromptTemplate { level, text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Substitute the basic caption into the slot. For the basic template
    /// (which has no slot) this returns the template text unchanged.
    pub fn render(&self, basic_caption: &str) -> String {
        self.text.replace(BASIC_SLOT, basic_caption)
    }
}

/// One template per level.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub basic: PromptTemplate,
    pub anchor: PromptTemplate,
    pub motion: PromptTemplate,
    pub holi: PromptTemplate,
}

impl TemplateSet {
    /// Built-in templates, used whenever no template directory is configured.
    pub fn defaults() -> Self {
        let basic = "Watch the video and state its core event in one short sentence. \
                     Name the main subject and what happens. Use at most twenty words.";
        let anchor = "The video shows: {basic_caption}. Describe only the first frame in detail: \
                      the salient objects, the scene type, spatial layout, colors, and appearance. \
                      Write it as a prompt suitable for a text-to-image model.";
        let motion = "The video shows: {basic_caption}. Describe the dynamic content: what moves, \
                      in which direction, how fast, and how postures or positions change over time. \
                      Do not describe static appearance.";
        let holi = "The video shows: {basic_caption}. Combine the static scene and its dynamics \
                    into one coherent narrative covering the whole clip from start to end.";
        TemplateSet {
            basic: PromptTemplate::new(CaptionLevel::Basic, basic).unwrap(),
            anchor: PromptTemplate::new(CaptionLevel::Anchor, anchor).unwrap(),
            motion: PromptTemplate::new(CaptionLevel::Motion, motion).unwrap(),
            holi: PromptTemplate::new(CaptionLevel::Holi, holi).unwrap(),
        }
    }

    /// Load templates from a directory containing `basic.txt`, `anchor.txt`,
    /// `motion.txt`, and `holi.txt`. Trailing whitespace is trimmed.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |level: CaptionLevel| -> Result<PromptTemplate> {
            let path = dir.join(format!("{level}.txt"));
            let text = missing_as_validation(fs::read_to_string(&path), &path)?;
            let text = text.trim_end();
            if text.is_empty() {
                return Err(Error::Validation(format!(
                    "template file {} is empty",
                    path.display()
                )));
            }
            PromptTemplate::new(level, text)
        };
        Ok(TemplateSet {
            basic: read(CaptionLevel::Basic)?,
            anchor: read(CaptionLevel::Anchor)?,
            motion: read(CaptionLevel::Motion)?,
            holi: read(CaptionLevel::Holi)?,
        })
    }

    /// Write the four templates into `dir` using the file layout that
    /// [`TemplateSet::load`] expects.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for t in [&self.basic, &self.anchor, &self.motion, &self.holi] {
            let path = dir.join(format!("{}.txt", t.level));
            atomic_write(&path, format!("{}\n", t.text).as_bytes())?;
        }
        Ok(())
    }

    pub fn get(&self, level: CaptionLevel) -> &PromptTemplate {
        match level {
            CaptionLevel::Basic => &self.basic,
            CaptionLevel::Anchor => &self.anchor,
            CaptionLevel::Motion => &self.motion,
            CaptionLevel::Holi => &self.holi,
        }
    }
}

/// The four mined captions for one clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionBundle {
    pub clip_id: String,
    pub c_basic: String,
    pub c_anchor: String,
    pub c_motion: String,
    pub c_holi: String,
}

impl CaptionBundle {
    pub fn get(&self, level: CaptionLevel) -> &str {
        match level {
            CaptionLevel::Basic => &self.c_basic,
            CaptionLevel::Anchor => &self.c_anchor,
            CaptionLevel::Motion => &self.c_motion,
            CaptionLevel::Holi => &self.c_holi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_id.trim().is_empty() || self.clip_id.chars().any(char::is_whitespace) {
            return Err(Error::Validation(format!(
                "caption bundle clip id {:?} must be nonempty and whitespace-free",
                self.clip_id
            )));
        }
        for level in CaptionLevel::ALL {
            if self.get(level).trim().is_empty() {
                return Err(Error::Validation(format!(
                    "caption bundle for {} has an empty {level} caption",
                    self.clip_id
                )));
            }
        }
        let n = word_count(&self.c_basic);
        if n > MAX_BASIC_WORDS {
            return Err(Error::Validation(format!(
                "basic caption for {} has {n} words, cap is {MAX_BASIC_WORDS}",
                self.clip_id
            )));
        }
        Ok(())
    }

    /// Serialize as a plain-text record: one `level caption` line per level,
    /// preceded by a `clip` line. Newlines and backslashes in captions are
    /// escaped so each field stays on one line.
    pub fn to_text(&self) -> String {
        let mut out = format!("clip {}\n", self.clip_id);
        for level in CaptionLevel::ALL {
            out.push_str(level.name());
            out.push(' ');
            out.push_str(&escape(self.get(level)));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let bad = |detail: String| Error::Validation(format!("caption record {origin}: {detail}"));
        let mut lines = text.lines();
        let clip_id = lines
            .next()
            .and_then(|l| l.strip_prefix("clip "))
            .ok_or_else(|| bad("first line must be `clip <id>`".into()))?
            .to_string();
        let mut captions = Vec::new();
        for level in CaptionLevel::ALL {
            let line = lines
                .next()
                .ok_or_else(|| bad(format!("missing {level} line")))?;
            let rest = line
                .strip_prefix(level.name())
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| bad(format!("expected `{level} <caption>`, got {line:?}")))?;
            captions.push(unescape(rest, origin)?);
        }
        if let Some(extra) = lines.next() {
            return Err(bad(format!("unexpected trailing line {extra:?}")));
        }
        let mut it = captions.into_iter();
        let bundle = CaptionBundle {
            clip_id,
            c_basic: it.next().unwrap(),
            c_anchor: it.next().unwrap(),
            c_motion: it.next().unwrap(),
            c_holi: it.next().unwrap(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        atomic_write(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = missing_as_validation(fs::read_to_string(path), path)?;
        Self::parse(&text, &path.display().to_string())
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str, origin: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            other => {
                return Err(Error::Validation(format!(
                    "caption record {origin}: bad escape \\{}",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        }
    }
    Ok(out)
}

pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Truncate to at most `max` whitespace words. Text within the limit is
/// returned unchanged (inner whitespace preserved).
pub fn truncate_words(s: &str, max: usize) -> String {
    if word_count(s) <= max {
        s.to_string()
    } else {
        s.split_whitespace().take(max).collect::<Vec<_>>().join(" ")
    }
}

/// A multimodal language model that turns (prompt, video reference) into a
/// caption. The video reference is opaque to this crate: mocks hash it, an
/// HTTP backend forwards it for the server to resolve.
pub trait MllmClient: Send + Sync {
    fn generate(&self, prompt: &str, video_ref: &str) -> Result<String>;
}

/// Mock that returns the prompt verbatim. Useful for asserting on the exact
/// prompt a mining stage sent.
#[derive(Debug, Clone, Default)]
pub struct EchoMock;

impl MllmClient for EchoMock {
    fn generate(&self, prompt: &str, _video_ref: &str) -> Result<String> {
        Ok(prompt.to_string())
    }
}

/// Mock that fabricates a plausible caption as a pure function of
/// (prompt, video reference): the pair is hashed and the digest drives word
/// choices from fixed pools. Different prompts or clips give different but
/// stable captions.
#[derive(Debug, Clone, Default)]
pub struct DescriptiveMock;

impl MllmClient for DescriptiveMock {
    fn generate(&self, prompt: &str, video_ref: &str) -> Result<String> {
        const SUBJECTS: [&str; 8] = [
            "a cyclist", "a dancer", "a striped kite", "a red tram", "a gull", "a juggler",
            "two rowers", "a paper boat",
        ];
        const VERBS: [&str; 8] = [
            "glides", "spins", "drifts", "accelerates", "sways", "circles", "bounces", "weaves",
        ];
        const SCENES: [&str; 8] = [
            "across a wet plaza",
            "along the harbor wall",
            "through morning fog",
            "under flickering lamps",
            "over cracked asphalt",
            "past market stalls",
            "beside a canal",
            "beneath swaying pines",
        ];
        const TAILS: [&str; 8] = [
            "in warm light",
            "at a steady pace",
            "with sudden pauses",
            "casting long shadows",
            "as the crowd watches",
            "while rain begins",
            "in sharp focus",
            "against a pale sky",
        ];
        let mut hasher = Sha256::new();
        hasher.update(prompt.as_bytes());
        hasher.update([0u8]);
        hasher.update(video_ref.as_bytes());
        let d = hasher.finalize();
        let pick = |i: usize, pool: &[&'static str]| pool[d[i] as usize % pool.len()];
        let mut caption = format!(
            "{} {} {}",
            pick(0, &SUBJECTS),
            pick(1, &VERBS),
            pick(2, &SCENES)
        );
        // One or two tail clauses, so caption lengths vary a little.
        caption.push(' ');
        caption.push_str(pick(3, &TAILS));
        if d[4] % 2 == 0 {
            caption.push_str(", then ");
            caption.push_str(pick(5, &VERBS));
            caption.push(' ');
            caption.push_str(pick(6, &TAILS));
        }
        Ok(caption)
    }
}

/// Adapter turning a closure into an [`MllmClient`]; handy in tests.
pub struct FnMock<F>(pub F);

impl<F> MllmClient for FnMock<F>
where
    F: Fn(&str, &str) -> Result<String> + Send + Sync,
{
    fn generate(&self, prompt: &str, video_ref: &str) -> Result<String> {
        (self.0)(prompt, video_ref)
    }
}

/// HTTP-backed client: one POST per generate call.
///
/// Request body is JSON `{"prompt": ..., "video_ref": ...}`; the response is
/// JSON `{"caption": ...}`. Transport errors and non-2xx statuses are
/// reported as mining errors; the retry policy lives in the mining driver,
/// not here, so one `generate` call is exactly one POST.
pub struct HttpClient {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(60))
            .build();
        HttpClient {
            endpoint: endpoint.into(),
            agent,
        }
    }

    pub fn with_timeout(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        HttpClient {
            endpoint: endpoint.into(),
            agent,
        }
    }
}

impl MllmClient for HttpClient {
    fn generate(&self, prompt: &str, video_ref: &str) -> Result<String> {
        let body = serde_json::json!({ "prompt": prompt, "video_ref": video_ref });
        let response = self
            .agent
            .post(&self.endpoint)
            .send_json(body)
            .map_err(|e| Error::Mining(format!("caption request to {}: {e}", self.endpoint)))?;
        let value: serde_json::Value = response
            .into_json()
            .map_err(|e| Error::Mining(format!("caption response from {}: {e}", self.endpoint)))?;
        match value.get("caption").and_then(|c| c.as_str()) {
            Some(caption) => Ok(caption.to_string()),
            None => Err(Error::Mining(format!(
                "caption response from {} lacks a string `caption` field",
                self.endpoint
            ))),
        }
    }
}

/// Knobs for the mining driver.
#[derive(Debug, Clone)]
pub struct MiningOptions {
    /// Worker threads when mining a corpus; at most this many requests are
    /// in flight at once.
    pub max_in_flight: usize,
    /// Extra attempts after a failed generate call.
    pub retries: u32,
    /// Sleep before the first retry; doubles on each subsequent one.
    pub initial_backoff: Duration,
    /// Skip clips whose caption record already exists and parses cleanly.
    pub resume: bool,
}

impl Default for MiningOptions {
    fn default() -> Self {
        MiningOptions {
            max_in_flight: 4,
            retries: 3,
            initial_backoff: Duration::from_millis(250),
            resume: true,
        }
    }
}

/// Outcome of mining one clip: whatever captions were obtained, plus any
/// per-level errors. Only a job with all four captions and no errors can be
/// turned into a bundle.
#[derive(Debug, Clone)]
pub struct CaptionJob {
    pub clip_id: String,
    pub captions: BTreeMap<CaptionLevel, String>,
    pub errors: Vec<(CaptionLevel, String)>,
}

impl CaptionJob {
    pub fn is_complete(&self) -> bool {
        self.errors.is_empty() && self.captions.len() == CaptionLevel::ALL.len()
    }

    pub fn into_bundle(self) -> Result<CaptionBundle> {
        if !self.is_complete() {
            let summary = self
                .errors
                .iter()
                .map(|(level, msg)| format!("{level}: {msg}"))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::Mining(format!(
                "clip {} mined incompletely ({summary})",
                self.clip_id
            )));
        }
        let mut captions = self.captions;
        let mut take = |level| captions.remove(&level).unwrap();
        let bundle = CaptionBundle {
            clip_id: self.clip_id,
            c_basic: take(CaptionLevel::Basic),
            c_anchor: take(CaptionLevel::Anchor),
            c_motion: take(CaptionLevel::Motion),
            c_holi: take(CaptionLevel::Holi),
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

/// Call the client with retries and exponential backoff. An `Ok` response
/// that is blank counts as a level failure without retrying (a deterministic
/// client would only return blank again).
fn generate_with_retry(
    client: &dyn MllmClient,
    prompt: &str,
    video_ref: &str,
    opts: &MiningOptions,
) -> std::result::Result<String, String> {
    let mut backoff = opts.initial_backoff;
    let mut last_err = String::new();
    for attempt in 0..=opts.retries {
        if attempt > 0 {
            thread::sleep(backoff);
            backoff *= 2;
        }
        match client.generate(prompt, video_ref) {
            Ok(text) => {
                let text = text.trim();
                if text.is_empty() {
                    return Err("client returned an empty caption".into());
                }
                return Ok(text.to_string());
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(format!(
        "client failed after {} attempts: {last_err}",
        opts.retries + 1
    ))
}

/// Mine all four caption levels for one clip.
///
/// Stage 1 produces the basic caption (truncated to [`MAX_BASIC_WORDS`]);
/// stage 2 renders the anchor, motion, and holi prompts — in that order —
/// with the basic caption substituted in. If stage 1 fails, the stage-2
/// levels are recorded as skipped rather than being prompted without their
/// anchor text.
pub fn mine_clip(
    client: &dyn MllmClient,
    clip_id: &str,
    video_ref: &str,
    templates: &TemplateSet,
    opts: &MiningOptions,
) -> CaptionJob {
    let mut job = CaptionJob {
        clip_id: clip_id.to_string(),
        captions: BTreeMap::new(),
        errors: Vec::new(),
    };
    let basic = match generate_with_retry(client, templates.basic.text(), video_ref, opts) {
        Ok(text) => truncate_words(&text, MAX_BASIC_WORDS),
        Err(msg) => {
            job.errors.push((CaptionLevel::Basic, msg));
            for level in CaptionLevel::STAGE_TWO {
                job.errors
                    .push((level, "skipped: no basic caption to build on".into()));
            }
            return job;
        }
    };
    job.captions.insert(CaptionLevel::Basic, basic.clone());
    for level in CaptionLevel::STAGE_TWO {
        let prompt = templates.get(level).render(&basic);
        match generate_with_retry(client, &prompt, video_ref, opts) {
            Ok(text) => {
                job.captions.insert(level, text);
            }
            Err(msg) => job.errors.push((level, msg)),
        }
    }
    job
}

/// Convenience wrapper mining a loaded clip, using its id as the video
/// reference.
pub fn mine_captions(
    client: &dyn MllmClient,
    clip: &VideoClip,
    templates: &TemplateSet,
) -> CaptionJob {
    mine_clip(
        client,
        &clip.clip_id,
        &clip.clip_id,
        templates,
        &MiningOptions::default(),
    )
}

/// One unit of corpus work: which clip, what to hand the model, where the
/// record goes (relative to the dataset root).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiningTask {
    pub clip_id: String,
    pub video_ref: String,
    pub caption_path: String,
}

/// Corpus-level result. `failed` holds per-level error lists for clips that
/// did not produce a complete bundle; those clips have no record on disk.
#[derive(Debug, Clone, Default)]
pub struct MiningOutcome {
    pub completed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, Vec<(CaptionLevel, String)>)>,
}

/// Derive the task list from a manifest: one task per distinct clip, with
/// the on-disk video path as the model's video reference. Entries for the
/// same clip (one per subject) must agree on paths.
pub fn manifest_tasks(root: &Path, manifest: &DatasetManifest) -> Result<Vec<MiningTask>> {
    let mut by_clip: BTreeMap<&str, MiningTask> = BTreeMap::new();
    for entry in &manifest.entries {
        let task = MiningTask {
            clip_id: entry.clip_id.clone(),
            video_ref: root.join(&entry.video_path).display().to_string(),
            caption_path: entry.caption_path.clone(),
        };
        match by_clip.get(entry.clip_id.as_str()) {
            None => {
                by_clip.insert(&entry.clip_id, task);
            }
            Some(prev) if *prev == task => {}
            Some(prev) => {
                return Err(Error::Validation(format!(
                    "clip {} appears with conflicting video/caption paths ({:?} vs {:?})",
                    entry.clip_id,
                    (&prev.video_ref, &prev.caption_path),
                    (&task.video_ref, &task.caption_path),
                )));
            }
        }
    }
    Ok(by_clip.into_values().collect())
}

/// Mine a whole corpus with a bounded worker pool.
///
/// Workers pull tasks from a shared queue, so at most `max_in_flight`
/// requests run concurrently while the stage-1 → stage-2 order inside each
/// clip stays strict. Complete bundles are written to their caption path;
/// failures are collected rather than aborting the run.
pub fn mine_corpus(
    client: &dyn MllmClient,
    root: &Path,
    tasks: &[MiningTask],
    templates: &TemplateSet,
    opts: &MiningOptions,
) -> Result<MiningOutcome> {
    enum TaskResult {
        Completed(String),
        Skipped(String),
        Failed(String, Vec<(CaptionLevel, String)>),
        Io(Error),
    }

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<TaskResult>();
    let workers = opts.max_in_flight.max(1).min(tasks.len().max(1));
    thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(task) = tasks.get(i) else { break };
                let record = root.join(&task.caption_path);
                if opts.resume {
                    if let Ok(existing) = CaptionBundle::load(&record) {
                        if existing.clip_id == task.clip_id {
                            let _ = tx.send(TaskResult::Skipped(task.clip_id.clone()));
                            continue;
                        }
                    }
                }
                let job = mine_clip(client, &task.clip_id, &task.video_ref, templates, opts);
                let result = if job.is_complete() {
                    match job.into_bundle().and_then(|b| b.save(&record)) {
                        Ok(()) => TaskResult::Completed(task.clip_id.clone()),
                        Err(e) => TaskResult::Io(e),
                    }
                } else {
                    TaskResult::Failed(task.clip_id.clone(), job.errors)
                };
                let _ = tx.send(result);
            });
        }
        drop(tx);
    });

    let mut outcome = MiningOutcome::default();
    for result in rx {
        match result {
            TaskResult::Completed(id) => outcome.completed.push(id),
            TaskResult::Skipped(id) => outcome.skipped.push(id),
            TaskResult::Failed(id, errors) => outcome.failed.push((id, errors)),
            TaskResult::Io(e) => return Err(e),
        }
    }
    outcome.completed.sort();
    outcome.skipped.sort();
    outcome.failed.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(outcome)
}

/// Mean whitespace-token count per level, rounded to one decimal place.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenStats {
    pub basic: f64,
    pub anchor: f64,
    pub motion: f64,
    pub holi: f64,
}

impl TokenStats {
    pub fn get(&self, level: CaptionLevel) -> f64 {
        match level {
            CaptionLevel::Basic => self.basic,
            CaptionLevel::Anchor => self.anchor,
            CaptionLevel::Motion => self.motion,
            CaptionLevel::Holi => self.holi,
        }
    }
}

pub fn token_stats(bundles: &[CaptionBundle]) -> Result<TokenStats> {
    if bundles.is_empty() {
        return Err(Error::Validation(
            "token_stats needs at least one caption bundle".into(),
        ));
    }
    let mean = |level: CaptionLevel| {
        let total: usize = bundles.iter().map(|b| word_count(b.get(level))).sum();
        let mean = total as f64 / bundles.len() as f64;
        (mean * 10.0).round() / 10.0
    };
    Ok(TokenStats {
        basic: mean(CaptionLevel::Basic),
        anchor: mean(CaptionLevel::Anchor),
        motion: mean(CaptionLevel::Motion),
        holi: mean(CaptionLevel::Holi),
    })
}

/// BLEU/ROUGE scores for a caption pair, all in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityScores {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge_l: f64,
}

/// Lowercase, strip punctuation and symbols, split on whitespace.
fn similarity_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Modified n-gram precision: candidate n-gram counts clipped by the
/// reference counts. Returns `None` when the candidate has no n-grams.
fn modified_precision(candidate: &[String], reference: &[String], n: usize) -> Option<f64> {
    let cand = ngram_counts(candidate, n);
    if cand.is_empty() {
        return None;
    }
    let refc = ngram_counts(reference, n);
    let total: usize = cand.values().sum();
    let clipped: usize = cand
        .iter()
        .map(|(gram, count)| (*count).min(refc.get(gram).copied().unwrap_or(0)))
        .sum();
    Some(clipped as f64 / total as f64)
}

fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len >= reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

/// BLEU-n with uniform weights and brevity penalty, `a` as candidate and
/// `b` as reference. Zero if any order up to `n` has zero precision.
fn bleu(a: &[String], b: &[String], max_n: usize) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        match modified_precision(a, b, n) {
            Some(p) if p > 0.0 => log_sum += p.ln() / max_n as f64,
            _ => return 0.0,
        }
    }
    brevity_penalty(a.len(), b.len()) * log_sum.exp()
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// ROUGE-1 F1: unigram overlap with counts clipped on both sides.
fn rouge1(a: &[String], b: &[String]) -> f64 {
    let ca = ngram_counts(a, 1);
    let cb = ngram_counts(b, 1);
    let overlap: usize = ca
        .iter()
        .map(|(gram, count)| (*count).min(cb.get(gram).copied().unwrap_or(0)))
        .sum();
    f1(overlap as f64 / a.len() as f64, overlap as f64 / b.len() as f64)
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            row[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(row[j])
            };
        }
        std::mem::swap(&mut prev, &mut row);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
fn rouge_l(a: &[String], b: &[String]) -> f64 {
    let lcs = lcs_length(a, b) as f64;
    f1(lcs / a.len() as f64, lcs / b.len() as f64)
}

/// Compare two captions with BLEU-1, BLEU-4, ROUGE-1, and ROUGE-L over
/// lowercased, punctuation-stripped whitespace tokens. `a` is the BLEU
/// candidate. Inputs must be nonempty; a pair that normalizes to no tokens
/// scores zero everywhere.
pub fn caption_similarity(a: &str, b: &str) -> Result<SimilarityScores> {
    if a.trim().is_empty() || b.trim().is_empty() {
        return Err(Error::Validation(
            "caption_similarity requires two nonempty captions".into(),
        ));
    }
    let ta = similarity_tokens(a);
    let tb = similarity_tokens(b);
    if ta.is_empty() || tb.is_empty() {
        return Ok(SimilarityScores {
            bleu1: 0.0,
            bleu4: 0.0,
            rouge1: 0.0,
            rouge_l: 0.0,
        });
    }
    Ok(SimilarityScores {
        bleu1: bleu(&ta, &tb, 1),
        bleu4: bleu(&ta, &tb, 4),
        rouge1: rouge1(&ta, &tb),
        rouge_l: rouge_l(&ta, &tb),
    })
}

/// A named scalar similarity between two captions. The built-in BLEU/ROUGE
/// scorers implement it; metrics that need external resources (synonym
/// lexicons, pretrained encoders) can be plugged in through the same trait.
pub trait SimilarityScorer {
    fn name(&self) -> &'static str;
    fn score(&self, a: &str, b: &str) -> Result<f64>;
}

macro_rules! builtin_scorer {
    ($ty:ident, $label:literal, $field:ident) => {
        #[derive(Debug, Clone, Copy, Default)]
        pub struct $ty;

        impl SimilarityScorer for $ty {
            fn name(&self) -> &'static str {
                $label
            }
            fn score(&self, a: &str, b: &str) -> Result<f64> {
                Ok(caption_similarity(a, b)?.$field)
            }
        }
    };
}

builtin_scorer!(Bleu1Scorer, "bleu1", bleu1);
builtin_scorer!(Bleu4Scorer, "bleu4", bleu4);
builtin_scorer!(Rouge1Scorer, "rouge1", rouge1);
builtin_scorer!(RougeLScorer, "rougeL", rouge_l);

/// All built-in scorers, for table-style reports.
pub fn builtin_scorers() -> Vec<Box<dyn SimilarityScorer>> {
    vec![
        Box::new(Bleu1Scorer),
        Box::new(Bleu4Scorer),
        Box::new(Rouge1Scorer),
        Box::new(RougeLScorer),
    ]
}
