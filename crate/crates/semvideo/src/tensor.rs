//! On-disk tensor format.
//!
//! Every tensor artifact (fMRI vectors, video frames, embeddings, latents,
//! checkpoint records) uses one little-endian binary layout:
//!
//! ```text
//! magic   4 bytes   "SVT1"
//! rank    u32
//! dims    rank × u32
//! data    prod(dims) × f32, row-major (C order)
//! ```
//!
//! Readers reject wrong magic, truncated files, and trailing bytes, so a
//! corrupt artifact fails loudly instead of decoding into garbage.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SVT1";

/// Serialize a tensor to the binary format.
pub fn to_bytes(t: &ArrayD<f32>) -> Vec<u8> {
    let dims = t.shape();
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    // `iter` follows logical row-major order even for non-standard layouts.
    for &v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse a tensor from bytes. `origin` names the source in error messages.
pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<ArrayD<f32>> {
    let fail = |detail: String| Error::TensorFormat {
        origin: origin.to_string(),
        detail,
    };
    if bytes.len() < 8 {
        return Err(fail(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..4],
            MAGIC
        )));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_len = 8 + 4 * rank;
    if bytes.len() < header_len {
        return Err(fail(format!("truncated header: rank {rank} needs {header_len} bytes")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let off = 8 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        dims.push(d);
        count = count
            .checked_mul(d)
            .ok_or_else(|| fail(format!("dims {dims:?} overflow element count")))?;
    }
    let expected = count
        .checked_mul(4)
        .and_then(|p| p.checked_add(header_len))
        .ok_or_else(|| fail(format!("dims {dims:?} overflow byte count")))?;
    if bytes.len() < expected {
        return Err(fail(format!(
            "truncated payload: {} bytes, dims {:?} need {}",
            bytes.len() - header_len,
            dims,
            4 * count
        )));
    }
    if bytes.len() > expected {
        return Err(fail(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = header_len + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| fail(format!("shape error: {e}")))
}

/// Write a tensor to `path` atomically (temp file + rename).
pub fn write_tensor(path: &Path, t: &ArrayD<f32>) -> Result<()> {
    atomic_write(path, &to_bytes(t))
}

/// Read a tensor from `path`.
pub fn read_tensor(path: &Path) -> Result<ArrayD<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}

/// Read a tensor and widen to f64 (model compute runs in f64).
pub fn read_tensor_f64(path: &Path) -> Result<ArrayD<f64>> {
    Ok(read_tensor(path)?.mapv(f64::from))
}

/// Narrow to f32 and write.
pub fn write_tensor_f64(path: &Path, t: &ArrayD<f64>) -> Result<()> {
    write_tensor(path, &t.mapv(|v| v as f32))
}

/// Write `bytes` to `path` via a temp file in the same directory, then
/// rename over the target, so readers never observe a half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn roundtrip(dims: &[usize]) {
        let n: usize = dims.iter().product();
        let t = ArrayD::from_shape_vec(
            IxDyn(dims),
            (0..n).map(|i| i as f32 * 0.5 - 3.0).collect(),
        )
        .unwrap();
        let back = from_bytes(&to_bytes(&t), "test").unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn roundtrips_various_ranks() {
        roundtrip(&[7]);
        roundtrip(&[3, 5]);
        roundtrip(&[2, 3, 4]);
        roundtrip(&[2, 3, 2, 2]);
        roundtrip(&[0]); // empty tensors are legal
    }

    #[test]
    fn known_byte_layout() {
        let t = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0f32, -2.0]).unwrap();
        let bytes = to_bytes(&t);
        let mut expect = Vec::new();
        expect.extend_from_slice(b"SVT1");
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut b = to_bytes(&ArrayD::zeros(IxDyn(&[2])));
        b[0] = b'X';
        assert!(matches!(
            from_bytes(&b, "t"),
            Err(Error::TensorFormat { .. })
        ));
    }

    #[test]
    fn rejects_truncation_and_trailing() {
        let b = to_bytes(&ArrayD::zeros(IxDyn(&[3, 3])));
        assert!(from_bytes(&b[..b.len() - 1], "t").is_err());
        assert!(from_bytes(&b[..9], "t").is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(from_bytes(&extra, "t").is_err());
    }

    #[test]
    fn rejects_overflowing_dims() {
        let mut b = Vec::new();
        b.extend_from_slice(b"SVT1");
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(from_bytes(&b, "t").is_err());
    }

    #[test]
    fn non_standard_layout_serializes_row_major() {
        let t = ArrayD::from_shape_vec(IxDyn(&[2, 3]), (0..6).map(|i| i as f32).collect())
            .unwrap();
        let viewed = t.t().to_owned().into_dyn(); // [3, 2], reversed strides
        let back = from_bytes(&to_bytes(&viewed.clone()), "t").unwrap();
        assert_eq!(back, viewed);
    }
}
