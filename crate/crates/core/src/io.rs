//! Tensor persistence.
//!
//! A single tensor is stored as a little-endian blob: `u32` rank, `rank`
//! `u32` dimensions, then `product(dims)` `f64` values in row-major order.
//! A checkpoint is a `.bin` file holding several such blobs back to back and a
//! `.json` sidecar listing, in order, each tensor's name, shape and byte
//! offset.

use crate::error::{LabError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Decodes one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| LabError::Format("truncated tensor blob".into()))?;
        pos += n;
        Ok(s)
    };
    let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if rank > 8 {
        return Err(LabError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
    }
    Ok((Tensor::new(shape, data)?, pos))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(LabError::Format(format!(
            "{} has {} trailing bytes",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub tensors: Vec<SidecarEntry>,
}

pub const CHECKPOINT_FORMAT: &str = "dpa-lab-tensors/1";

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut p = stem.as_os_str().to_owned();
    p.push(ext);
    PathBuf::from(p)
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn write_checkpoint(stem: &Path, named: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    let mut entries = Vec::with_capacity(named.len());
    for (name, t) in named {
        entries.push(SidecarEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: buf.len(),
        });
        encode_tensor(t, &mut buf);
    }
    std::fs::write(with_ext(stem, ".bin"), buf)?;
    let sidecar = Sidecar {
        format: CHECKPOINT_FORMAT.into(),
        tensors: entries,
    };
    std::fs::write(
        with_ext(stem, ".json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn read_checkpoint(stem: &Path) -> Result<Vec<(String, Tensor)>> {
    let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(with_ext(stem, ".json"))?)?;
    if sidecar.format != CHECKPOINT_FORMAT {
        return Err(LabError::Format(format!(
            "unknown checkpoint format {}",
            sidecar.format
        )));
    }
    let bytes = std::fs::read(with_ext(stem, ".bin"))?;
    let mut out = Vec::with_capacity(sidecar.tensors.len());
    for e in sidecar.tensors {
        let slice = bytes
            .get(e.offset..)
            .ok_or_else(|| LabError::Format(format!("offset of {} out of range", e.name)))?;
        let (t, _) = decode_tensor(slice)?;
        if t.shape() != e.shape.as_slice() {
            return Err(LabError::Format(format!(
                "shape of {} disagrees with sidecar",
                e.name
            )));
        }
        out.push((e.name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    #[test]
    fn blob_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        assert_eq!(&buf[..4], &2u32.to_le_bytes());
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..20], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 4 + 8 + 16);
    }

    #[test]
    fn truncated_blob_is_error() {
        let mut buf = Vec::new();
        encode_tensor(&Tensor::zeros(&[2, 2]), &mut buf);
        buf.pop();
        assert!(decode_tensor(&buf).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SplitMix64::new(4);
        let named = vec![
            ("a".to_string(), Tensor::randn(&[3, 2], 1.0, &mut rng)),
            ("b".to_string(), Tensor::randn(&[4, 4, 2], 1.0, &mut rng)),
        ];
        let stem = dir.path().join("ckpt");
        write_checkpoint(&stem, &named).unwrap();
        assert_eq!(read_checkpoint(&stem).unwrap(), named);
    }

    proptest! {
        #[test]
        fn blob_roundtrip(rows in 0usize..5, cols in 0usize..5, seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let t = Tensor::randn(&[rows, cols], 3.0, &mut rng);
            let mut buf = Vec::new();
            encode_tensor(&t, &mut buf);
            let (back, used) = decode_tensor(&buf).unwrap();
            prop_assert_eq!(used, buf.len());
            prop_assert!(back.bit_eq(&t));
        }
    }
}
