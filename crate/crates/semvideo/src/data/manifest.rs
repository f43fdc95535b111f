//! Line-based dataset manifest.
//!
//! ```text
//! # semvideo dataset manifest
//! split train
//! tr_seconds 2
//! lag_seconds 4
//! entry clip000 sub0 processed/sub0/clip000.svt videos/clip000.svt captions/clip000.txt
//! ```
//!
//! Key-value lines first, then one `entry` line per (clip, subject) pair:
//! clip id, subject id, fMRI path, video path, caption path. Paths are
//! relative to the dataset root and contain no whitespace. Comments (`#`)
//! and blank lines are ignored; unknown keys are rejected.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub subject_id: String,
    pub fmri_path: String,
    pub video_path: String,
    pub caption_path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub tr_seconds: f64,
    pub lag_seconds: f64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.tr_seconds <= 0.0 {
            return Err(Error::Validation(format!(
                "tr_seconds must be positive, got {}",
                self.tr_seconds
            )));
        }
        if self.lag_seconds < 0.0 {
            return Err(Error::Validation(format!(
                "lag_seconds must be nonnegative, got {}",
                self.lag_seconds
            )));
        }
        let k = self.lag_seconds / self.tr_seconds;
        if (k - k.round()).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "lag_seconds {} is not divisible by tr_seconds {}",
                self.lag_seconds, self.tr_seconds
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            for (field, value) in [
                ("clip_id", &e.clip_id),
                ("subject_id", &e.subject_id),
                ("fmri_path", &e.fmri_path),
                ("video_path", &e.video_path),
                ("caption_path", &e.caption_path),
            ] {
                if value.is_empty() || value.chars().any(char::is_whitespace) {
                    return Err(Error::Validation(format!(
                        "entry field {field} is empty or contains whitespace: {value:?}"
                    )));
                }
            }
            for path in [&e.fmri_path, &e.video_path, &e.caption_path] {
                if Path::new(path).is_absolute() {
                    return Err(Error::Validation(format!(
                        "manifest paths must be relative, got {path:?}"
                    )));
                }
            }
            if !seen.insert((e.clip_id.clone(), e.subject_id.clone())) {
                return Err(Error::Validation(format!(
                    "duplicate entry for clip {} subject {}",
                    e.clip_id, e.subject_id
                )));
            }
        }
        Ok(())
    }

    /// Lag expressed in whole TR rows.
    pub fn lag_rows(&self) -> usize {
        (self.lag_seconds / self.tr_seconds).round() as usize
    }

    /// Subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.subject_id) {
                out.push(e.subject_id.clone());
            }
        }
        out
    }

    /// Entries for one subject, in manifest order.
    pub fn entries_for(&self, subject_id: &str) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.subject_id == subject_id)
            .collect()
    }

    /// Clip ids in first-appearance order.
    pub fn clips(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.clip_id) {
                out.push(e.clip_id.clone());
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# semvideo dataset manifest\n");
        s.push_str(&format!("split {}\n", self.split));
        s.push_str(&format!("tr_seconds {}\n", self.tr_seconds));
        s.push_str(&format!("lag_seconds {}\n", self.lag_seconds));
        for e in &self.entries {
            s.push_str(&format!(
                "entry {} {} {} {} {}\n",
                e.clip_id, e.subject_id, e.fmri_path, e.video_path, e.caption_path
            ));
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut split = None;
        let mut tr_seconds = None;
        let mut lag_seconds = None;
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| {
                Error::Validation(format!("{origin} line {}: {msg}", lineno + 1))
            };
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            match key {
                "split" => match rest.as_slice() {
                    [v] => split = Some(Split::parse(v)?),
                    _ => return Err(bad("split takes one value".into())),
                },
                "tr_seconds" | "lag_seconds" => {
                    let [v] = rest.as_slice() else {
                        return Err(bad(format!("{key} takes one value")));
                    };
                    let num: f64 = v
                        .parse()
                        .map_err(|_| bad(format!("{key} is not a number: {v:?}")))?;
                    if key == "tr_seconds" {
                        tr_seconds = Some(num);
                    } else {
                        lag_seconds = Some(num);
                    }
                }
                "entry" => {
                    let [clip, subject, fmri, video, caption] = rest.as_slice() else {
                        return Err(bad(format!(
                            "entry takes 5 fields, got {}",
                            rest.len()
                        )));
                    };
                    entries.push(ManifestEntry {
                        clip_id: clip.to_string(),
                        subject_id: subject.to_string(),
                        fmri_path: fmri.to_string(),
                        video_path: video.to_string(),
                        caption_path: caption.to_string(),
                    });
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        let man = DatasetManifest {
            split: split.ok_or_else(|| {
                Error::Validation(format!("{origin}: missing split line"))
            })?,
            tr_seconds: tr_seconds.ok_or_else(|| {
                Error::Validation(format!("{origin}: missing tr_seconds line"))
            })?,
            lag_seconds: lag_seconds.ok_or_else(|| {
                Error::Validation(format!("{origin}: missing lag_seconds line"))
            })?,
            entries,
        };
        man.validate()?;
        Ok(man)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        tensor::atomic_write(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Validation(format!("manifest not found: {}", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        Self::parse(&text, &path.display().to_string())
    }
}
