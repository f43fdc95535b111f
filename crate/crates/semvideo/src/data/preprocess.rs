//! fMRI preprocessing: reliability-based voxel selection, BOLD-lag
//! correction, and train-statistics z-scoring.
//!
//! Voxel selection follows the repeated-presentation protocol: the two
//! repetitions of the training stimulus are split into 8 equal temporal
//! blocks, a Pearson correlation between repetitions is computed per block,
//! Fisher z-transformed, and a per-voxel one-sample t-test (one-sided,
//! H₁: mean z > 0) against 0 is thresholded at `alpha` with Bonferroni
//! correction over the raw voxel count.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, Ix2, IxDyn};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::data::SubjectProfile;
use crate::error::{Error, Result};
use crate::tensor;

/// Number of temporal blocks the repetition pair is split into.
pub const SELECTION_BLOCKS: usize = 8;

/// Pearson correlation; either input having zero variance gives 0.
pub fn pearson_r(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.len() < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Fisher z-transform, `atanh(r)`; requires `|r| < 1`.
pub fn fisher_z(r: f64) -> Result<f64> {
    if !r.is_finite() || r.abs() >= 1.0 {
        return Err(Error::Validation(format!(
            "fisher_z requires |r| < 1, got {r}"
        )));
    }
    Ok(r.atanh())
}

/// Fisher z with the correlation clamped just inside (−1, 1), so perfectly
/// correlated blocks (r = ±1 to rounding) map to a large finite z instead
/// of a domain error.
fn fisher_z_clamped(r: f64) -> f64 {
    const EPS: f64 = 1e-12;
    r.clamp(-(1.0 - EPS), 1.0 - EPS).atanh()
}

/// Reliability-based voxel selection over two repetitions (`T×V_raw` each).
/// Returns the inclusion mask over raw voxels.
pub fn select_voxels(rep_a: &Array2<f64>, rep_b: &Array2<f64>, alpha: f64) -> Result<Vec<bool>> {
    if rep_a.dim() != rep_b.dim() {
        return Err(Error::Validation(format!(
            "repetition shapes differ: {:?} vs {:?}",
            rep_a.dim(),
            rep_b.dim()
        )));
    }
    let (t, v_raw) = rep_a.dim();
    if t < 3 {
        return Err(Error::Validation(format!(
            "need at least 3 time points for voxel selection, got {t}"
        )));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Validation(format!("alpha must be in (0,1), got {alpha}")));
    }
    let threshold = alpha / v_raw as f64;
    let df = (SELECTION_BLOCKS - 1) as f64;
    let t_dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");

    let mut mask = vec![false; v_raw];
    let mut col_a = vec![0.0; t];
    let mut col_b = vec![0.0; t];
    for v in 0..v_raw {
        for (i, val) in rep_a.column(v).iter().enumerate() {
            col_a[i] = *val;
        }
        for (i, val) in rep_b.column(v).iter().enumerate() {
            col_b[i] = *val;
        }
        let mut zs = [0.0; SELECTION_BLOCKS];
        for (b, z) in zs.iter_mut().enumerate() {
            let lo = b * t / SELECTION_BLOCKS;
            let hi = (b + 1) * t / SELECTION_BLOCKS;
            // blocks with fewer than 2 rows carry no correlation information
            let r = if hi - lo >= 2 {
                pearson_r(&col_a[lo..hi], &col_b[lo..hi])
            } else {
                0.0
            };
            *z = fisher_z_clamped(r);
        }
        let mean = zs.iter().sum::<f64>() / SELECTION_BLOCKS as f64;
        let var =
            zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / (SELECTION_BLOCKS - 1) as f64;
        let sd = var.sqrt();
        let p = if sd == 0.0 {
            // degenerate spread: identical z in every block — certain
            // positive effect if the mean is positive, otherwise no evidence
            if mean > 0.0 {
                0.0
            } else {
                1.0
            }
        } else {
            let t_stat = mean / (sd / (SELECTION_BLOCKS as f64).sqrt());
            1.0 - t_dist.cdf(t_stat)
        };
        mask[v] = p < threshold;
    }
    Ok(mask)
}

/// Shift a `T×D` series forward by the hemodynamic lag: row `t` of the
/// output is row `t + k` of the input with `k = lag/tr`.
pub fn apply_bold_lag(
    series: &Array2<f64>,
    lag_seconds: f64,
    tr_seconds: f64,
) -> Result<Array2<f64>> {
    if tr_seconds <= 0.0 {
        return Err(Error::Config(format!("tr_seconds must be positive, got {tr_seconds}")));
    }
    let k_real = lag_seconds / tr_seconds;
    if k_real < 0.0 || (k_real - k_real.round()).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "lag {lag_seconds} s is not a nonnegative whole number of TRs (TR = {tr_seconds} s)"
        )));
    }
    let k = k_real.round() as usize;
    let t = series.nrows();
    if t <= k {
        return Err(Error::Validation(format!(
            "series has {t} rows, cannot drop {k} lag rows"
        )));
    }
    Ok(series.slice(ndarray::s![k.., ..]).to_owned())
}

/// Per-column mean and standard deviation (population), with a floor so
/// constant columns z-score to zero instead of dividing by zero.
pub fn train_stats(train_rows: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = train_rows.nrows() as f64;
    let mut means = Vec::with_capacity(train_rows.ncols());
    let mut stds = Vec::with_capacity(train_rows.ncols());
    for col in train_rows.columns() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        means.push(mean);
        stds.push(if sd < 1e-8 { 1.0 } else { sd });
    }
    (means, stds)
}

pub fn zscore_row(row: &[f64], mean: &[f64], std: &[f64]) -> Array1<f64> {
    Array1::from_iter(
        row.iter()
            .zip(mean.iter().zip(std.iter()))
            .map(|(&x, (&m, &s))| (x - m) / s),
    )
}

fn read_series(path: &Path) -> Result<Array2<f64>> {
    let t = tensor::read_tensor_f64(path)?;
    t.into_dimensionality::<Ix2>()
        .map_err(|_| Error::Validation(format!("{} is not a T×V matrix", path.display())))
}

/// Run the full preprocessing pass over a raw dataset directory:
/// per subject, lag-correct both repetition series, select voxels on the
/// training windows, average the repetitions, z-score with training stats,
/// and write per-sample vectors plus `manifest.train.txt`/`manifest.test.txt`.
pub fn preprocess_dataset(
    root: &Path,
    alpha: f64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let raw_train = DatasetManifest::load(&root.join("manifest.raw.train.txt"))?;
    let raw_test = DatasetManifest::load(&root.join("manifest.raw.test.txt"))?;
    if raw_train.tr_seconds != raw_test.tr_seconds || raw_train.lag_seconds != raw_test.lag_seconds
    {
        return Err(Error::Validation(
            "raw train/test manifests disagree on tr/lag".into(),
        ));
    }

    let subjects = raw_train.subjects();
    if subjects.is_empty() {
        return Err(Error::Validation("raw manifest has no entries".into()));
    }
    // every subject must see the same stimulus sequence for position-based
    // window indexing to be meaningful
    let train_clips: Vec<String> = raw_train
        .entries_for(&subjects[0])
        .iter()
        .map(|e| e.clip_id.clone())
        .collect();
    let test_clips: Vec<String> = raw_test
        .entries_for(&subjects[0])
        .iter()
        .map(|e| e.clip_id.clone())
        .collect();
    for s in &subjects {
        let tc: Vec<String> = raw_train.entries_for(s).iter().map(|e| e.clip_id.clone()).collect();
        let xc: Vec<String> = raw_test.entries_for(s).iter().map(|e| e.clip_id.clone()).collect();
        if tc != train_clips || xc != test_clips {
            return Err(Error::Validation(format!(
                "subject {s} has a different clip sequence than {}",
                subjects[0]
            )));
        }
    }
    let n_train = train_clips.len();
    let n_total = n_train + test_clips.len();

    let mut out_train = Vec::new();
    let mut out_test = Vec::new();
    for subject in &subjects {
        let sub_entries = raw_train.entries_for(subject);
        let rep_a_path = root.join(&sub_entries[0].fmri_path);
        let rep_b_name = sub_entries[0].fmri_path.replace("rep_a", "rep_b");
        if rep_b_name == sub_entries[0].fmri_path {
            return Err(Error::Validation(format!(
                "cannot derive second repetition path from {}",
                sub_entries[0].fmri_path
            )));
        }
        let rep_a = apply_bold_lag(
            &read_series(&rep_a_path)?,
            raw_train.lag_seconds,
            raw_train.tr_seconds,
        )?;
        let rep_b = apply_bold_lag(
            &read_series(&root.join(&rep_b_name))?,
            raw_train.lag_seconds,
            raw_train.tr_seconds,
        )?;
        if rep_a.nrows() < n_total || rep_b.nrows() < n_total {
            return Err(Error::Validation(format!(
                "subject {subject}: lagged series has {} rows, need {n_total}",
                rep_a.nrows()
            )));
        }

        let train_a = rep_a.slice(ndarray::s![..n_train, ..]).to_owned();
        let train_b = rep_b.slice(ndarray::s![..n_train, ..]).to_owned();
        let mask = select_voxels(&train_a, &train_b, alpha)?;
        let selected: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        if selected.is_empty() {
            return Err(Error::Validation(format!(
                "subject {subject}: no voxel passed selection at alpha {alpha}"
            )));
        }

        // averaged repetitions restricted to selected voxels, all windows
        let averaged = (&rep_a + &rep_b) * 0.5;
        let mut picked = Array2::zeros((n_total, selected.len()));
        for (j, &v) in selected.iter().enumerate() {
            picked
                .column_mut(j)
                .assign(&averaged.column(v).slice(ndarray::s![..n_total]));
        }
        let (mean, std) = train_stats(&picked.slice(ndarray::s![..n_train, ..]).to_owned());

        let profile = SubjectProfile {
            subject_id: subject.clone(),
            voxel_mask: mask,
            train_mean: mean.clone(),
            train_std: std.clone(),
        };
        let sub_dir = root.join("processed").join(subject);
        profile.save(&sub_dir)?;

        let write_window = |w: usize, entry: &ManifestEntry| -> Result<ManifestEntry> {
            let row: Vec<f64> = picked.row(w).to_vec();
            let z = zscore_row(&row, &mean, &std);
            let rel = format!("processed/{subject}/{}.svt", entry.clip_id);
            tensor::write_tensor(
                &root.join(&rel),
                &ArrayD::from_shape_vec(
                    IxDyn(&[z.len()]),
                    z.iter().map(|&v| v as f32).collect(),
                )
                .unwrap(),
            )?;
            Ok(ManifestEntry {
                fmri_path: rel,
                ..entry.clone()
            })
        };
        for (w, entry) in raw_train.entries_for(subject).iter().enumerate() {
            out_train.push(write_window(w, entry)?);
        }
        for (w, entry) in raw_test.entries_for(subject).iter().enumerate() {
            out_test.push(write_window(n_train + w, entry)?);
        }
    }

    // processed manifests: lag already applied, so it is recorded as 0
    let train = DatasetManifest {
        split: Split::Train,
        tr_seconds: raw_train.tr_seconds,
        lag_seconds: 0.0,
        entries: out_train,
    };
    let test = DatasetManifest {
        split: Split::Test,
        tr_seconds: raw_train.tr_seconds,
        lag_seconds: 0.0,
        entries: out_test,
    };
    train.save(&root.join("manifest.train.txt"))?;
    test.save(&root.join("manifest.test.txt"))?;
    Ok((train, test))
}
