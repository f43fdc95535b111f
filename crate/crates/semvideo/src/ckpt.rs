//! Shared checkpoint container: a structured-text header terminated by an
//! `end` line, followed by one rank-1 f32 tensor record per named parameter
//! (plus optimizer moment vectors when present). The header schema above the
//! `subject`/`param`/`adam` lines is owned by each model family; this module
//! handles the byte layout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::AdamW;
use crate::tensor;

pub(crate) const MAGIC_LINE: &str = "semvideo-checkpoint 1";
const END: &[u8] = b"\nend\n";

/// Append the `subject`, `param`, and optional `adam` bookkeeping lines that
/// every checkpoint kind shares, in the order the records will be written.
pub(crate) fn push_common_lines(
    head: &mut String,
    subjects: &[(String, usize)],
    params: &[(String, Vec<f64>)],
    opt: Option<&AdamW>,
) {
    for (s, d) in subjects {
        let _ = writeln!(head, "subject {s} {d}");
    }
    for (name, data) in params {
        let _ = writeln!(head, "param {name} {}", data.len());
    }
    if let Some(o) = opt {
        let _ = writeln!(head, "adam {} {} {}", o.step, o.m.len(), o.weight_decay);
    }
}

/// Write `head` (which must *not* yet contain the `end` line), then the
/// parameter records in order, then the optimizer moments.
pub(crate) fn write_file(
    path: &Path,
    mut head: String,
    params: &[(String, Vec<f64>)],
    opt: Option<&AdamW>,
) -> Result<()> {
    head.push_str("end\n");
    let mut bytes = head.into_bytes();
    let mut push_record = |data: &[f64]| {
        let t = ArrayD::from_shape_vec(
            IxDyn(&[data.len()]),
            data.iter().map(|&v| v as f32).collect(),
        )
        .expect("rank-1 shape always valid");
        bytes.extend_from_slice(&tensor::to_bytes(&t));
    };
    for (_, data) in params {
        push_record(data);
    }
    if let Some(o) = opt {
        push_record(&o.m);
        push_record(&o.v);
    }
    tensor::atomic_write(path, &bytes)
}

/// Parsed header plus a cursor over the binary record section.
pub(crate) struct RawCheckpoint {
    origin: String,
    /// Single-valued header lines (first token is the key).
    pub fields: BTreeMap<String, String>,
    pub subjects: Vec<(String, usize)>,
    /// Declared parameter records: name and scalar count, in file order.
    pub params: Vec<(String, usize)>,
    body: Vec<u8>,
    cursor: usize,
}

impl RawCheckpoint {
    pub fn parse(path: &Path) -> Result<Self> {
        let bytes = crate::error::missing_as_validation(fs::read(path), path)?;
        let origin = path.display().to_string();
        let bad =
            |detail: String| Error::Validation(format!("checkpoint {origin}: {detail}"));

        let split = bytes
            .windows(END.len())
            .position(|w| w == END)
            .ok_or_else(|| bad("missing end-of-header marker".into()))?;
        let head = std::str::from_utf8(&bytes[..split])
            .map_err(|_| bad("header is not UTF-8".into()))?;
        let body = bytes[split + END.len()..].to_vec();

        let mut lines = head.lines();
        if lines.next() != Some(MAGIC_LINE) {
            return Err(bad(format!("first line is not {MAGIC_LINE:?}")));
        }
        let mut fields = BTreeMap::new();
        let mut subjects = Vec::new();
        let mut params = Vec::new();
        for line in lines {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "subject" => {
                    let (name, dim) = rest
                        .split_once(' ')
                        .ok_or_else(|| bad(format!("malformed subject line {line:?}")))?;
                    let dim = dim
                        .parse()
                        .map_err(|_| bad(format!("bad subject dim in {line:?}")))?;
                    subjects.push((name.to_string(), dim));
                }
                "param" => {
                    let (name, len) = rest
                        .rsplit_once(' ')
                        .ok_or_else(|| bad(format!("malformed param line {line:?}")))?;
                    let len = len
                        .parse()
                        .map_err(|_| bad(format!("bad param length in {line:?}")))?;
                    params.push((name.to_string(), len));
                }
                _ => {
                    fields.insert(key.to_string(), rest.to_string());
                }
            }
        }
        Ok(RawCheckpoint {
            origin,
            fields,
            subjects,
            params,
            body,
            cursor: 0,
        })
    }

    pub fn bad(&self, detail: impl Into<String>) -> Error {
        Error::Validation(format!("checkpoint {}: {}", self.origin, detail.into()))
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| self.bad(format!("missing header field {key:?}")))
    }

    pub fn get_num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| self.bad(format!("bad numeric field {key:?}")))
    }

    /// Whitespace-separated numeric list field.
    pub fn get_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| self.bad(format!("bad entry in field {key:?}"))))
            .collect()
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        let got = self.get("kind")?;
        if got != kind {
            return Err(self.bad(format!("kind is {got:?}, expected {kind:?}")));
        }
        Ok(())
    }

    /// Pull the next rank-1 record off the binary section.
    pub fn next_record(&mut self, len: usize, what: &str) -> Result<Vec<f64>> {
        let size = 12 + 4 * len;
        let rest = &self.body[self.cursor..];
        if rest.len() < size {
            return Err(self.bad(format!("truncated record for {what}")));
        }
        let t = tensor::from_bytes(&rest[..size], &self.origin)?;
        self.cursor += size;
        if t.ndim() != 1 || t.len() != len {
            return Err(self.bad(format!("record for {what} has wrong shape")));
        }
        Ok(t.iter().map(|&v| v as f64).collect())
    }

    /// Read every declared parameter record, verifying name and length
    /// against `expected` (the model's visit order).
    pub fn read_params(&mut self, expected: &[(String, Vec<f64>)]) -> Result<Vec<f64>> {
        if expected.len() != self.params.len() {
            return Err(self.bad(format!(
                "{} parameter records, model needs {}",
                self.params.len(),
                expected.len()
            )));
        }
        let declared = self.params.clone();
        let mut flat = Vec::new();
        for ((name, len), (want_name, want)) in declared.iter().zip(expected) {
            if name != want_name || *len != want.len() {
                return Err(self.bad(format!(
                    "parameter {name:?} (len {len}) does not match expected {want_name:?} (len {})",
                    want.len()
                )));
            }
            flat.extend(self.next_record(*len, name)?);
        }
        Ok(flat)
    }

    /// Read the optimizer state if the header declared one.
    pub fn read_adam(&mut self) -> Result<Option<AdamW>> {
        let Some(line) = self.fields.get("adam").cloned() else {
            return Ok(None);
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(self.bad("adam line needs 3 values"));
        }
        let step: u64 = parts[0]
            .parse()
            .map_err(|_| self.bad("bad adam step"))?;
        let len: usize = parts[1]
            .parse()
            .map_err(|_| self.bad("bad adam length"))?;
        let wd: f64 = parts[2]
            .parse()
            .map_err(|_| self.bad("bad adam decay"))?;
        let m = self.next_record(len, "adam m")?;
        let v = self.next_record(len, "adam v")?;
        let mut a = AdamW::new(len, wd);
        a.step = step;
        a.m = m;
        a.v = v;
        Ok(Some(a))
    }

    /// Call after all records are consumed; rejects trailing bytes.
    pub fn finish(&self) -> Result<()> {
        let left = self.body.len() - self.cursor;
        if left != 0 {
            return Err(self.bad(format!("{left} trailing bytes")));
        }
        Ok(())
    }
}

/// Newest `epoch_NNNN.ckpt` in `dir` by epoch number, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<std::path::PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, std::path::PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let Some(num) = name
            .strip_prefix("epoch_")
            .and_then(|r| r.strip_suffix(".ckpt"))
        else {
            continue;
        };
        let Ok(epoch) = num.parse::<usize>() else {
            continue;
        };
        if best.as_ref().map_or(true, |(b, _)| epoch > *b) {
            best = Some((epoch, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub(crate) fn checkpoint_path(dir: &Path, epoch: usize) -> std::path::PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}
