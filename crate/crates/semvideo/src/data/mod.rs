//! Dataset model and persistence.
//!
//! A dataset lives under one root directory (overridable with the
//! `SEMVIDEO_DATA_DIR` environment variable) and is described by line-based
//! manifest files with relative paths, so a tree can be moved or compared
//! byte-for-byte. Tensors use the format in [`crate::tensor`].
//!
//! Submodules: [`manifest`] (the text format), [`preprocess`] (voxel
//! selection, BOLD-lag correction, z-scoring), [`fixture`] (seeded synthetic
//! dataset generation).

pub mod fixture;
pub mod manifest;
pub mod preprocess;

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array4, ArrayD, Ix1, Ix4};

use crate::error::{Error, Result};
use crate::tensor;

pub use fixture::{generate_fixture, FixtureConfig};
pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use preprocess::preprocess_dataset;

/// The three embedding levels a dataset carries targets for.
pub const EMBEDDING_LEVELS: [&str; 3] = ["anchor", "motion", "holi"];

/// Resolve the dataset root: `SEMVIDEO_DATA_DIR` wins over the configured
/// path when set and non-empty.
pub fn resolve_data_dir(configured: &Path) -> PathBuf {
    match std::env::var("SEMVIDEO_DATA_DIR") {
        Ok(v) if !v.is_empty() => PathBuf::from(v),
        _ => configured.to_path_buf(),
    }
}

/// One subject's voxel bookkeeping: which raw voxels were selected and the
/// training-split statistics used for z-scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectProfile {
    pub subject_id: String,
    /// Inclusion mask over the raw voxel axis.
    pub voxel_mask: Vec<bool>,
    /// Per-selected-voxel training mean, length = voxel_count().
    pub train_mean: Vec<f64>,
    /// Per-selected-voxel training standard deviation.
    pub train_std: Vec<f64>,
}

impl SubjectProfile {
    /// Number of selected voxels (the paper's D_m).
    pub fn voxel_count(&self) -> usize {
        self.voxel_mask.iter().filter(|&&b| b).count()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.voxel_count();
        if d == 0 {
            return Err(Error::Validation(format!(
                "subject {} has no selected voxels",
                self.subject_id
            )));
        }
        if self.train_mean.len() != d || self.train_std.len() != d {
            return Err(Error::Validation(format!(
                "subject {}: stats length {}/{} does not match {} selected voxels",
                self.subject_id,
                self.train_mean.len(),
                self.train_std.len(),
                d
            )));
        }
        Ok(())
    }

    /// Persist as three tensors (`mask.svt`, `mean.svt`, `std.svt`) in `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let mask: Vec<f32> = self
            .voxel_mask
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        let to1 = |v: Vec<f32>| ArrayD::from_shape_vec(ndarray::IxDyn(&[v.len()]), v).unwrap();
        tensor::write_tensor(&dir.join("mask.svt"), &to1(mask))?;
        tensor::write_tensor(
            &dir.join("mean.svt"),
            &to1(self.train_mean.iter().map(|&v| v as f32).collect()),
        )?;
        tensor::write_tensor(
            &dir.join("std.svt"),
            &to1(self.train_std.iter().map(|&v| v as f32).collect()),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, subject_id: &str) -> Result<Self> {
        let read1 = |name: &str| -> Result<Vec<f64>> {
            let t = tensor::read_tensor_f64(&dir.join(name))?;
            let t = t.into_dimensionality::<Ix1>().map_err(|_| {
                Error::Validation(format!("{}/{name} is not rank-1", dir.display()))
            })?;
            Ok(t.to_vec())
        };
        let profile = SubjectProfile {
            subject_id: subject_id.to_string(),
            voxel_mask: read1("mask.svt")?.iter().map(|&v| v != 0.0).collect(),
            train_mean: read1("mean.svt")?,
            train_std: read1("std.svt")?,
        };
        profile.validate()?;
        Ok(profile)
    }
}

/// One preprocessed fMRI response vector aligned to one stimulus window.
#[derive(Debug, Clone)]
pub struct FmriSample {
    pub subject_id: String,
    pub clip_id: String,
    /// Stimulus window position in TR units (counted after lag correction,
    /// per split, in manifest order).
    pub window_index: usize,
    /// z-scored BOLD amplitudes over the subject's selected voxels.
    pub x: Array1<f64>,
}

impl FmriSample {
    pub fn validate(&self, profile: &SubjectProfile) -> Result<()> {
        if self.x.len() != profile.voxel_count() {
            return Err(Error::Validation(format!(
                "sample {}/{} has {} voxels, subject profile says {}",
                self.subject_id,
                self.clip_id,
                self.x.len(),
                profile.voxel_count()
            )));
        }
        if !self.x.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!(
                "sample {}/{} contains non-finite values",
                self.subject_id, self.clip_id
            )));
        }
        Ok(())
    }
}

/// A short video: `frames` is `[n, height, width, 3]` with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    pub frames: Array4<f32>,
    pub fps: f64,
}

impl VideoClip {
    pub fn n_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn validate(&self) -> Result<()> {
        let (n, _, _, c) = self.frames.dim();
        if n < 1 {
            return Err(Error::Validation(format!("clip {} has no frames", self.clip_id)));
        }
        if c != 3 {
            return Err(Error::Validation(format!(
                "clip {} has {c} channels, expected 3",
                self.clip_id
            )));
        }
        if self.fps <= 0.0 {
            return Err(Error::Validation(format!("clip {} has fps {}", self.clip_id, self.fps)));
        }
        if !self
            .frames
            .iter()
            .all(|&v| v.is_finite() && (0.0..=1.0).contains(&v))
        {
            return Err(Error::Validation(format!(
                "clip {} has pixels outside [0,1]",
                self.clip_id
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        tensor::write_tensor(path, &self.frames.clone().into_dyn())
    }

    pub fn load(path: &Path, clip_id: &str, fps: f64) -> Result<Self> {
        let t = tensor::read_tensor(path)?;
        let frames = t.into_dimensionality::<Ix4>().map_err(|_| {
            Error::Validation(format!("clip {clip_id}: {} is not rank-4", path.display()))
        })?;
        let clip = VideoClip {
            clip_id: clip_id.to_string(),
            frames,
            fps,
        };
        clip.validate()?;
        Ok(clip)
    }
}

/// Map "file does not exist" onto a validation error naming the entry, so a
/// manifest pointing at a missing file is reported as user error.
fn missing_as_validation<T>(r: Result<T>, what: &str, clip_id: &str) -> Result<T> {
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

/// Load the preprocessed fMRI vector and the video for one manifest entry.
/// `window_index` is the entry's ordinal among its subject's entries.
pub fn load_sample(
    root: &Path,
    man: &DatasetManifest,
    entry: &ManifestEntry,
) -> Result<(FmriSample, VideoClip)> {
    let window_index = man
        .entries
        .iter()
        .filter(|e| e.subject_id == entry.subject_id)
        .position(|e| e.clip_id == entry.clip_id)
        .ok_or_else(|| {
            Error::Validation(format!(
                "entry {}/{} not found in its own manifest",
                entry.subject_id, entry.clip_id
            ))
        })?;
    let x = missing_as_validation(
        tensor::read_tensor_f64(&root.join(&entry.fmri_path)),
        "fMRI tensor",
        &entry.clip_id,
    )?;
    let x = x.into_dimensionality::<Ix1>().map_err(|_| {
        Error::Validation(format!(
            "fMRI tensor for clip {} is not a vector",
            entry.clip_id
        ))
    })?;
    let sample = FmriSample {
        subject_id: entry.subject_id.clone(),
        clip_id: entry.clip_id.clone(),
        window_index,
        x,
    };
    // clips span one stimulus window, so fps = frame count / TR
    let video = missing_as_validation(
        tensor::read_tensor(&root.join(&entry.video_path)),
        "video tensor",
        &entry.clip_id,
    )?;
    let frames = video.into_dimensionality::<Ix4>().map_err(|_| {
        Error::Validation(format!("video for clip {} is not rank-4", entry.clip_id))
    })?;
    let clip = VideoClip {
        clip_id: entry.clip_id.clone(),
        fps: frames.dim().0 as f64 / man.tr_seconds,
        frames,
    };
    clip.validate()?;
    Ok((sample, clip))
}

/// Write a sample pair back to the paths named by its entry.
pub fn save_sample(
    root: &Path,
    entry: &ManifestEntry,
    sample: &FmriSample,
    clip: &VideoClip,
) -> Result<()> {
    tensor::write_tensor_f64(
        &root.join(&entry.fmri_path),
        &sample.x.clone().into_dyn(),
    )?;
    clip.save(&root.join(&entry.video_path))
}

/// Conventional location of a clip's semantic-target tensor for one level.
pub fn target_path(root: &Path, clip_id: &str, level: &str) -> PathBuf {
    root.join("targets").join(format!("{clip_id}.{level}.svt"))
}

/// Conventional location of a clip's per-frame motion-latent tensor.
pub fn latent_path(root: &Path, clip_id: &str) -> PathBuf {
    root.join("latents").join(format!("{clip_id}.svt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn video_clip_validation() {
        let mut clip = VideoClip {
            clip_id: "c".into(),
            frames: Array4::from_elem((2, 4, 4, 3), 0.5),
            fps: 3.0,
        };
        assert!(clip.validate().is_ok());
        clip.frames[[0, 0, 0, 0]] = 1.5;
        assert!(clip.validate().is_err());
        clip.frames[[0, 0, 0, 0]] = 0.5;
        clip.fps = 0.0;
        assert!(clip.validate().is_err());
    }

    #[test]
    fn subject_profile_roundtrip() {
        let dir = std::env::temp_dir().join(format!("svt-profile-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = SubjectProfile {
            subject_id: "sub0".into(),
            voxel_mask: vec![true, false, true, true],
            train_mean: vec![0.1, -0.2, 3.0],
            train_std: vec![1.0, 2.0, 0.5],
        };
        p.save(&dir).unwrap();
        let q = SubjectProfile::load(&dir, "sub0").unwrap();
        assert_eq!(q.voxel_mask, p.voxel_mask);
        assert_eq!(q.voxel_count(), 3);
        // stats survive the f32 round trip at f32 precision
        for (a, b) in q.train_mean.iter().zip(&p.train_mean) {
            assert!((a - b).abs() < 1e-6);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
