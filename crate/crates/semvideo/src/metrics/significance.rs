//! Paired significance testing between per-sample metric series.
//!
//! Comparisons between a method and a baseline are made on paired
//! per-sample values: bootstrap resampling (100 resamples by default)
//! estimates the sampling distribution of the mean paired difference, and a
//! two-sided t statistic on that distribution yields the p-value. Results
//! are bucketed into the four tiers used by the report tables, each with a
//! fixed highlight colour.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::fmt;

/// Default number of bootstrap resamples.
pub const DEFAULT_BOOTSTRAP: usize = 100;

/// Significance buckets for reported comparisons, from strongest to none.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignificanceTier {
    /// p < 0.0001
    Extreme,
    /// p < 0.01
    Strong,
    /// p < 0.05
    Nominal,
    /// p >= 0.05
    NotSignificant,
}

impl SignificanceTier {
    pub fn for_p(p: f64) -> Self {
        if p < 0.0001 {
            SignificanceTier::Extreme
        } else if p < 0.01 {
            SignificanceTier::Strong
        } else if p < 0.05 {
            SignificanceTier::Nominal
        } else {
            SignificanceTier::NotSignificant
        }
    }

    /// Highlight colour used in report tables for cells at this tier.
    pub fn color_hex(&self) -> &'static str {
        match self {
            SignificanceTier::Extreme => "#DCEAF7",
            SignificanceTier::Strong => "#FEF1F3",
            SignificanceTier::Nominal => "#FEF6BE",
            SignificanceTier::NotSignificant => "#E8F3E1",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SignificanceTier::Extreme => "p<0.0001",
            SignificanceTier::Strong => "p<0.01",
            SignificanceTier::Nominal => "p<0.05",
            SignificanceTier::NotSignificant => "ns",
        }
    }
}

impl fmt::Display for SignificanceTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Outcome of a paired bootstrap comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignificanceResult {
    /// Mean paired difference (`ours - baseline`).
    pub mean_diff: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub tier: SignificanceTier,
}

/// Tests whether `ours` and `baseline` differ, treating entries at the same
/// index as paired measurements of the same sample.
///
/// `n_boot` resamples (with replacement, seeded) of the paired differences
/// give a bootstrap distribution of the mean difference; its mean and
/// spread form a t statistic with `n_boot - 1` degrees of freedom, tested
/// two-sided, so improvements and regressions are flagged alike. Series
/// must be the same length (at least 2). Identical series return `p = 1`.
pub fn bootstrap_significance(
    ours: &[f64],
    baseline: &[f64],
    n_boot: usize,
    seed: u64,
) -> Result<SignificanceResult> {
    if ours.len() != baseline.len() {
        return Err(Error::Validation(format!(
            "paired significance needs equal lengths, got {} vs {}",
            ours.len(),
            baseline.len()
        )));
    }
    let n = ours.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "paired significance needs at least 2 samples, got {n}"
        )));
    }
    if n_boot < 2 {
        return Err(Error::Validation(format!(
            "bootstrap needs at least 2 resamples, got {n_boot}"
        )));
    }
    let diffs: Vec<f64> = ours.iter().zip(baseline).map(|(a, b)| a - b).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Validation(
            "significance input contains non-finite values".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boot_means = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += diffs[rng.gen_range(0..n)];
        }
        boot_means.push(acc / n as f64);
    }
    let mean = boot_means.iter().sum::<f64>() / n_boot as f64;
    let var = boot_means
        .iter()
        .map(|m| (m - mean) * (m - mean))
        .sum::<f64>()
        / (n_boot - 1) as f64;
    let sd = var.sqrt();

    let p = if sd < 1e-300 {
        // Degenerate bootstrap: every resample lands on the same mean.
        if mean.abs() < 1e-300 {
            1.0
        } else {
            0.0
        }
    } else {
        let t = mean / sd;
        let dist = StudentsT::new(0.0, 1.0, (n_boot - 1) as f64)
            .expect("valid t distribution parameters");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };

    Ok(SignificanceResult {
        mean_diff: diffs.iter().sum::<f64>() / n as f64,
        p,
        tier: SignificanceTier::for_p(p),
    })
}
