//! Aggregate evaluation over paired clip sets and report serialization.
//!
//! [`evaluate`] scores a set of reconstructions against their ground-truth
//! clips and returns a [`MetricReport`]: aggregate values for every metric
//! plus the per-sample series needed for significance testing. Reports
//! serialize to CSV ([`report_csv`]) with one row per sample per metric and
//! aggregate rows that carry significance tiers and highlight colours when
//! a baseline comparison ([`compare_reports`]) is supplied, and to a
//! human-readable table ([`format_report`]) grouped into semantic, pixel,
//! and spatiotemporal levels.

use super::flow::clip_epe;
use super::significance::{bootstrap_significance, SignificanceResult};
use super::{
    clip_pcc, clip_ssim, embed_clip, hue_similarity, psnr, EmbedMode, EmbeddingBackend,
    VideoClip, PSNR_CAP_DB,
};
use crate::error::{Error, Result};
use crate::tensor::atomic_write;
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

/// Grouping level of a metric, mirroring the report table layout.
pub const GROUP_SEMANTIC: &str = "semantic";
pub const GROUP_PIXEL: &str = "pixel";
pub const GROUP_SPATIOTEMPORAL: &str = "spatiotemporal";

/// Settings for [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Small retrieval size (chance 1/N); 2 in the reference protocol.
    pub n_way_small: usize,
    /// Large retrieval size; 50 in the reference protocol. Must not exceed
    /// the number of evaluated samples — lower it for small sets.
    pub n_way_large: usize,
    /// Retrieval trials per sample (distractors are redrawn each trial).
    pub retrieval_trials: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_way_small: 2,
            n_way_large: 50,
            retrieval_trials: 10,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way_small < 2 {
            return Err(Error::Validation(format!(
                "n_way_small must be at least 2, got {}",
                self.n_way_small
            )));
        }
        if self.n_way_large < self.n_way_small {
            return Err(Error::Validation(format!(
                "n_way_large ({}) must be >= n_way_small ({})",
                self.n_way_large, self.n_way_small
            )));
        }
        if self.retrieval_trials == 0 {
            return Err(Error::Validation("retrieval_trials must be positive".into()));
        }
        Ok(())
    }
}

/// One metric's per-sample values and aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub name: String,
    pub group: &'static str,
    pub per_sample: Vec<f64>,
    pub aggregate: f64,
}

/// Full evaluation of a reconstruction set.
///
/// The named aggregate fields follow the standard report columns; the
/// retrieval fields hold whatever N-way sizes were configured (2 and 50 by
/// default — see `n_way_small` / `n_way_large` for the actual sizes, which
/// matter on sets too small for 50-way). `series` retains per-sample values
/// for every metric, in sample order, for significance testing.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub n_samples: usize,
    pub n_way_small: usize,
    pub n_way_large: usize,
    pub two_way_i: f64,
    pub two_way_v: f64,
    pub fifty_way_i: f64,
    pub fifty_way_v: f64,
    pub vifi: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub hue_sim: f64,
    pub clip_pcc: f64,
    pub epe: f64,
    pub series: Vec<MetricSeries>,
}

impl MetricReport {
    pub fn series_named(&self, name: &str) -> Option<&MetricSeries> {
        self.series.iter().find(|s| s.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.series {
            if s.per_sample.len() != self.n_samples {
                return Err(Error::Validation(format!(
                    "series '{}' has {} samples, report has {}",
                    s.name,
                    s.per_sample.len(),
                    self.n_samples
                )));
            }
            if s.per_sample.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "series '{}' contains non-finite values",
                    s.name
                )));
            }
        }
        for (name, v, lo, hi) in [
            ("retrieval (small, frame)", self.two_way_i, 0.0, 1.0),
            ("retrieval (small, video)", self.two_way_v, 0.0, 1.0),
            ("retrieval (large, frame)", self.fifty_way_i, 0.0, 1.0),
            ("retrieval (large, video)", self.fifty_way_v, 0.0, 1.0),
            ("vifi", self.vifi, -1.0, 1.0),
            ("ssim", self.ssim, -1.0, 1.0),
            ("hue-sim", self.hue_sim, -1.0, 1.0),
            ("clip-pcc", self.clip_pcc, -1.0, 1.0),
        ] {
            if !(lo..=hi).contains(&v) {
                return Err(Error::Validation(format!(
                    "{name} aggregate {v} outside [{lo}, {hi}]"
                )));
            }
        }
        if self.epe < 0.0 || !self.epe.is_finite() {
            return Err(Error::Validation(format!(
                "end-point error aggregate must be finite and non-negative, got {}",
                self.epe
            )));
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-sample N-way retrieval accuracy from cached embeddings.
///
/// For sample `i`, each trial draws `n_way - 1` distinct distractor indices
/// from the other ground-truth clips; a hit requires the true clip's cosine
/// to strictly exceed every distractor's.
fn retrieval_accuracy(
    queries: &[Array1<f64>],
    gallery: &[Array1<f64>],
    n_way: usize,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let n = queries.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let sims: Vec<f64> = gallery.iter().map(|g| queries[i].dot(g)).collect();
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let mut hits = 0usize;
        for _ in 0..trials {
            let (chosen, _) = others.partial_shuffle(rng, n_way - 1);
            if chosen.iter().all(|&j| sims[j] < sims[i]) {
                hits += 1;
            }
        }
        out.push(hits as f64 / trials as f64);
    }
    out
}

/// Scores reconstructions against ground truth, pairwise by index.
///
/// Requirements: equal-length non-empty sets, matching clip ids and shapes
/// per pair, at least 2 frames per clip (motion metrics), frames large
/// enough for SSIM and flow windows, and at least `n_way_large` samples so
/// retrieval can draw distractors. Use [`super::resample_frames`] first if
/// reconstruction and ground-truth frame counts differ. Everything is
/// deterministic given the config seed.
pub fn evaluate(
    recons: &[VideoClip],
    gts: &[VideoClip],
    backend: &dyn EmbeddingBackend,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    if recons.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty clip set".into()));
    }
    if recons.len() != gts.len() {
        return Err(Error::Validation(format!(
            "reconstruction and ground-truth sets differ in length: {} vs {}",
            recons.len(),
            gts.len()
        )));
    }
    let n = recons.len();
    if n < cfg.n_way_large {
        return Err(Error::Validation(format!(
            "{}-way retrieval needs at least {} samples, got {n}; lower n_way_large",
            cfg.n_way_large, cfg.n_way_large
        )));
    }
    for (r, g) in recons.iter().zip(gts) {
        if r.clip_id != g.clip_id {
            return Err(Error::Validation(format!(
                "paired sets must align by clip id, got '{}' vs '{}'",
                r.clip_id, g.clip_id
            )));
        }
        super::check_paired(r, g)?;
        if r.n_frames() < 2 {
            return Err(Error::Validation(format!(
                "clip '{}' has {} frame(s); motion metrics need at least 2",
                r.clip_id,
                r.n_frames()
            )));
        }
    }

    // Embeddings, cached once per clip and mode.
    let mut r_frame = Vec::with_capacity(n);
    let mut r_video = Vec::with_capacity(n);
    let mut g_frame = Vec::with_capacity(n);
    let mut g_video = Vec::with_capacity(n);
    for (r, g) in recons.iter().zip(gts) {
        r_frame.push(embed_clip(r, backend, EmbedMode::Frame)?);
        r_video.push(embed_clip(r, backend, EmbedMode::Video)?);
        g_frame.push(embed_clip(g, backend, EmbedMode::Frame)?);
        g_video.push(embed_clip(g, backend, EmbedMode::Video)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let small_i = retrieval_accuracy(&r_frame, &g_frame, cfg.n_way_small, cfg.retrieval_trials, &mut rng);
    let small_v = retrieval_accuracy(&r_video, &g_video, cfg.n_way_small, cfg.retrieval_trials, &mut rng);
    let large_i = retrieval_accuracy(&r_frame, &g_frame, cfg.n_way_large, cfg.retrieval_trials, &mut rng);
    let large_v = retrieval_accuracy(&r_video, &g_video, cfg.n_way_large, cfg.retrieval_trials, &mut rng);

    let mut vifi = Vec::with_capacity(n);
    let mut ssim_s = Vec::with_capacity(n);
    let mut psnr_s = Vec::with_capacity(n);
    let mut hue_s = Vec::with_capacity(n);
    let mut pcc_s = Vec::with_capacity(n);
    let mut epe_s = Vec::with_capacity(n);
    for (i, (r, g)) in recons.iter().zip(gts).enumerate() {
        let v = r_video[i].dot(&g_video[i]);
        vifi.push(v);
        ssim_s.push(clip_ssim(r, g)?);
        psnr_s.push(psnr(r, g)?.min(PSNR_CAP_DB));
        hue_s.push(hue_similarity(r, g)?);
        pcc_s.push(clip_pcc(r, backend, v)?);
        epe_s.push(clip_epe(r, g)?);
    }

    let series = vec![
        MetricSeries {
            name: format!("{}-way-I", cfg.n_way_small),
            group: GROUP_SEMANTIC,
            aggregate: mean(&small_i),
            per_sample: small_i,
        },
        MetricSeries {
            name: format!("{}-way-V", cfg.n_way_small),
            group: GROUP_SEMANTIC,
            aggregate: mean(&small_v),
            per_sample: small_v,
        },
        MetricSeries {
            name: format!("{}-way-I", cfg.n_way_large),
            group: GROUP_SEMANTIC,
            aggregate: mean(&large_i),
            per_sample: large_i,
        },
        MetricSeries {
            name: format!("{}-way-V", cfg.n_way_large),
            group: GROUP_SEMANTIC,
            aggregate: mean(&large_v),
            per_sample: large_v,
        },
        MetricSeries {
            name: "VIFI".to_string(),
            group: GROUP_SEMANTIC,
            aggregate: mean(&vifi),
            per_sample: vifi,
        },
        MetricSeries {
            name: "SSIM".to_string(),
            group: GROUP_PIXEL,
            aggregate: mean(&ssim_s),
            per_sample: ssim_s,
        },
        MetricSeries {
            name: "PSNR".to_string(),
            group: GROUP_PIXEL,
            aggregate: mean(&psnr_s),
            per_sample: psnr_s,
        },
        MetricSeries {
            name: "hue-sim".to_string(),
            group: GROUP_PIXEL,
            aggregate: mean(&hue_s),
            per_sample: hue_s,
        },
        MetricSeries {
            name: "CLIP-pcc".to_string(),
            group: GROUP_SPATIOTEMPORAL,
            aggregate: mean(&pcc_s),
            per_sample: pcc_s,
        },
        MetricSeries {
            name: "EPE".to_string(),
            group: GROUP_SPATIOTEMPORAL,
            aggregate: mean(&epe_s),
            per_sample: epe_s,
        },
    ];

    let report = MetricReport {
        n_samples: n,
        n_way_small: cfg.n_way_small,
        n_way_large: cfg.n_way_large,
        two_way_i: series[0].aggregate,
        two_way_v: series[1].aggregate,
        fifty_way_i: series[2].aggregate,
        fifty_way_v: series[3].aggregate,
        vifi: series[4].aggregate,
        ssim: series[5].aggregate,
        psnr: series[6].aggregate,
        hue_sim: series[7].aggregate,
        clip_pcc: series[8].aggregate,
        epe: series[9].aggregate,
        series,
    };
    report.validate()?;
    Ok(report)
}

/// Per-metric significance of `ours` against `baseline`.
///
/// Runs the paired bootstrap test on each metric series present in both
/// reports, with a per-metric seed derived from `seed` and the metric name
/// so adding metrics never perturbs existing results.
pub fn compare_reports(
    ours: &MetricReport,
    baseline: &MetricReport,
    n_boot: usize,
    seed: u64,
) -> Result<Vec<(String, SignificanceResult)>> {
    let mut out = Vec::new();
    for s in &ours.series {
        if let Some(b) = baseline.series_named(&s.name) {
            let mut hasher = Sha256::new();
            hasher.update(seed.to_le_bytes());
            hasher.update(s.name.as_bytes());
            let digest = hasher.finalize();
            let mut key = [0u8; 8];
            key.copy_from_slice(&digest[..8]);
            let metric_seed = u64::from_le_bytes(key);
            let r = bootstrap_significance(&s.per_sample, &b.per_sample, n_boot, metric_seed)?;
            out.push((s.name.clone(), r));
        }
    }
    if out.is_empty() {
        return Err(Error::Validation(
            "reports share no metric series to compare".into(),
        ));
    }
    Ok(out)
}

/// Serializes a report to CSV: one row per sample per metric, then an
/// aggregate row per metric. When a baseline comparison is supplied, each
/// aggregate row carries the p-value, tier label, and the tier's highlight
/// colour; otherwise those columns are empty.
pub fn report_csv(
    report: &MetricReport,
    significance: Option<&[(String, SignificanceResult)]>,
) -> String {
    let mut out = String::from("group,metric,sample,value,p,tier,color\n");
    for s in &report.series {
        for (i, v) in s.per_sample.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},,,", s.group, s.name, i, v);
        }
        let sig = significance
            .and_then(|rows| rows.iter().find(|(name, _)| name == &s.name))
            .map(|(_, r)| r);
        match sig {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "{},{},aggregate,{},{},{},{}",
                    s.group,
                    s.name,
                    s.aggregate,
                    r.p,
                    r.tier.label(),
                    r.tier.color_hex()
                );
            }
            None => {
                let _ = writeln!(out, "{},{},aggregate,{},,,", s.group, s.name, s.aggregate);
            }
        }
    }
    out
}

/// Writes [`report_csv`] output to disk atomically.
pub fn save_report_csv(
    path: &Path,
    report: &MetricReport,
    significance: Option<&[(String, SignificanceResult)]>,
) -> Result<()> {
    atomic_write(path, report_csv(report, significance).as_bytes())
}

/// Renders a report as an aligned text table grouped by metric level.
pub fn format_report(report: &MetricReport) -> String {
    let mut out = format!(
        "evaluation over {} sample(s), retrieval sizes {}/{}\n",
        report.n_samples, report.n_way_small, report.n_way_large
    );
    for group in [GROUP_SEMANTIC, GROUP_PIXEL, GROUP_SPATIOTEMPORAL] {
        let _ = writeln!(out, "[{group}]");
        for s in report.series.iter().filter(|s| s.group == group) {
            let _ = writeln!(out, "  {:<10} {:>12.6}", s.name, s.aggregate);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::StubEmbedder;
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array4;
    use rand::Rng;

    fn textured_clip(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, id: &str) -> VideoClip {
        // Smooth random texture with a per-frame drift so motion metrics
        // have something to estimate.
        let base = ndarray::Array3::from_shape_fn((h, w, 3), |_| rng.gen::<f32>());
        let dx = rng.gen_range(1..3);
        let frames = Array4::from_shape_fn((n, h, w, 3), |(t, y, x, c)| {
            let sx = (x + t * dx) % w;
            0.25 + 0.5 * base[[y, sx, c]]
        });
        VideoClip {
            clip_id: id.to_string(),
            frames,
        }
    }

    fn clip_set(seed: u64, count: usize) -> Vec<VideoClip> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| textured_clip(&mut rng, 3, 20, 20, &format!("clip_{i:03}")))
            .collect()
    }

    fn small_cfg() -> EvalConfig {
        EvalConfig {
            n_way_small: 2,
            n_way_large: 4,
            retrieval_trials: 8,
            seed: 3,
        }
    }

    #[test]
    fn perfect_reconstruction_hits_ideal_scores() {
        let gts = clip_set(1, 4);
        let recons = gts.clone();
        let backend = StubEmbedder::new(9);
        let report = evaluate(&recons, &gts, &backend, &small_cfg()).unwrap();

        assert_eq!(report.n_samples, 4);
        assert_relative_eq!(report.two_way_i, 1.0, epsilon = 1e-12);
        assert_relative_eq!(report.two_way_v, 1.0, epsilon = 1e-12);
        assert_relative_eq!(report.fifty_way_i, 1.0, epsilon = 1e-12);
        assert_relative_eq!(report.fifty_way_v, 1.0, epsilon = 1e-12);
        assert_relative_eq!(report.vifi, 1.0, epsilon = 1e-9);
        assert_relative_eq!(report.ssim, 1.0, epsilon = 1e-9);
        assert_eq!(report.psnr, PSNR_CAP_DB);
        assert_relative_eq!(report.hue_sim, 1.0, epsilon = 1e-9);
        assert_eq!(report.epe, 0.0);
        // Coherence is whatever the clip's adjacent frames give — only the
        // gate behaviour matters here (vifi = 1 is far above it).
        let pcc = report.series_named("CLIP-pcc").unwrap();
        for (i, r) in recons.iter().enumerate() {
            let direct = clip_pcc(r, &backend, 1.0).unwrap();
            assert_relative_eq!(pcc.per_sample[i], direct, epsilon = 1e-12);
        }
        report.validate().unwrap();
    }

    #[test]
    fn degraded_reconstruction_scores_strictly_worse() {
        let gts = clip_set(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let recons: Vec<VideoClip> = gts
            .iter()
            .map(|g| VideoClip {
                clip_id: g.clip_id.clone(),
                frames: g.frames.mapv(|v| (v + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0)),
            })
            .collect();
        let backend = StubEmbedder::new(9);
        let clean = evaluate(&gts.clone(), &gts, &backend, &small_cfg()).unwrap();
        let noisy = evaluate(&recons, &gts, &backend, &small_cfg()).unwrap();
        assert!(noisy.ssim < clean.ssim);
        assert!(noisy.psnr < clean.psnr);
        assert!(noisy.vifi <= clean.vifi + 1e-12);
        noisy.validate().unwrap();
    }

    #[test]
    fn evaluate_is_seed_deterministic() {
        let gts = clip_set(4, 4);
        let backend = StubEmbedder::new(2);
        let a = evaluate(&gts.clone(), &gts, &backend, &small_cfg()).unwrap();
        let b = evaluate(&gts.clone(), &gts, &backend, &small_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_validates_inputs() {
        let backend = StubEmbedder::new(1);
        let cfg = small_cfg();
        let gts = clip_set(5, 4);

        let empty: Vec<VideoClip> = vec![];
        assert_eq!(
            evaluate(&empty, &empty, &backend, &cfg).unwrap_err().exit_code(),
            2
        );

        let short = &gts[..3];
        assert_eq!(
            evaluate(short, &gts, &backend, &cfg).unwrap_err().exit_code(),
            2
        );

        // Too few samples for the large retrieval size.
        assert_eq!(
            evaluate(&gts[..3].to_vec(), &gts[..3].to_vec(), &backend, &cfg)
                .unwrap_err()
                .exit_code(),
            2
        );

        let mut misnamed = gts.clone();
        misnamed[0].clip_id = "other".to_string();
        assert_eq!(
            evaluate(&misnamed, &gts, &backend, &cfg).unwrap_err().exit_code(),
            2
        );

        let mut reshaped = gts.clone();
        reshaped[1] = VideoClip {
            clip_id: gts[1].clip_id.clone(),
            frames: Array4::from_elem((3, 24, 24, 3), 0.5),
        };
        assert_eq!(
            evaluate(&reshaped, &gts, &backend, &cfg).unwrap_err().exit_code(),
            2
        );
    }

    #[test]
    fn csv_has_one_row_per_sample_plus_aggregates() {
        let gts = clip_set(6, 4);
        let backend = StubEmbedder::new(3);
        let report = evaluate(&gts.clone(), &gts, &backend, &small_cfg()).unwrap();
        let csv = report_csv(&report, None);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        // Header + 10 metrics * (4 samples + 1 aggregate).
        assert_eq!(lines.len(), 1 + 10 * 5);
        assert_eq!(lines[0], "group,metric,sample,value,p,tier,color");
        assert!(lines[1].starts_with("semantic,2-way-I,0,"));
        assert!(lines[5].starts_with("semantic,2-way-I,aggregate,1"));
        // Without a baseline the significance columns stay empty.
        assert!(lines[5].ends_with(",,,"));
        // Every value parses back.
        for line in &lines[1..] {
            let value = line.split(',').nth(3).unwrap();
            value.parse::<f64>().unwrap();
        }
    }

    #[test]
    fn csv_aggregate_rows_carry_significance_colors() {
        let gts = clip_set(7, 4);
        let backend = StubEmbedder::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noisy: Vec<VideoClip> = gts
            .iter()
            .map(|g| VideoClip {
                clip_id: g.clip_id.clone(),
                frames: g.frames.mapv(|v| (v + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0)),
            })
            .collect();
        let ours = evaluate(&gts.clone(), &gts, &backend, &small_cfg()).unwrap();
        let baseline = evaluate(&noisy, &gts, &backend, &small_cfg()).unwrap();
        let sig = compare_reports(&ours, &baseline, 100, 5).unwrap();
        assert_eq!(sig.len(), 10);
        let again = compare_reports(&ours, &baseline, 100, 5).unwrap();
        assert_eq!(sig, again);

        let csv = report_csv(&ours, Some(&sig));
        let aggregate_lines: Vec<&str> = csv
            .lines()
            .filter(|l| l.contains(",aggregate,"))
            .collect();
        assert_eq!(aggregate_lines.len(), 10);
        for line in aggregate_lines {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 7);
            assert!(!fields[4].is_empty(), "p column should be filled: {line}");
            assert!(fields[6].starts_with('#'), "color column should be a hex colour: {line}");
        }
    }

    #[test]
    fn text_report_groups_metrics_by_level() {
        let gts = clip_set(8, 4);
        let backend = StubEmbedder::new(3);
        let report = evaluate(&gts.clone(), &gts, &backend, &small_cfg()).unwrap();
        let text = format_report(&report);
        let sem = text.find("[semantic]").unwrap();
        let pix = text.find("[pixel]").unwrap();
        let st = text.find("[spatiotemporal]").unwrap();
        assert!(sem < pix && pix < st);
        assert!(text.contains("2-way-I"));
        assert!(text.contains("4-way-V"));
        assert!(text.contains("EPE"));
    }

    #[test]
    fn save_report_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let gts = clip_set(9, 4);
        let backend = StubEmbedder::new(3);
        let report = evaluate(&gts.clone(), &gts, &backend, &small_cfg()).unwrap();
        let path = dir.path().join("metrics.csv");
        save_report_csv(&path, &report, None).unwrap();
        let on_disk = std::fs::read_to_string(&path).unwrap();
        assert_eq!(on_disk, report_csv(&report, None));
    }
}
