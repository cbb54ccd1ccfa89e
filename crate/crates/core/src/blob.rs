//! Named tensor blobs on disk: one file per tensor holding a little-endian
//! shape header (`u32` rank, then `u32` dims) followed by the values as
//! little-endian `f32` or `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FurnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// File name used for a tensor name; `/` separators become `.`.
pub fn blob_file_name(name: &str) -> String {
    format!("{}.bin", name.replace('/', "."))
}

pub fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * t.rank() + t.len() * dtype.width());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode(bytes: &[u8], dtype: Dtype) -> Result<Tensor> {
    let word = |i: usize| -> Result<usize> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| FurnError::ShapeMismatch("truncated blob header".into()))
    };
    let rank = word(0)?;
    let shape = (1..=rank).map(word).collect::<Result<Vec<_>>>()?;
    let body = &bytes[4 + 4 * rank..];
    let n: usize = shape.iter().product();
    if body.len() != n * dtype.width() {
        return Err(FurnError::ShapeMismatch(format!(
            "blob of shape {shape:?} holds {} bytes, expected {}",
            body.len(),
            n * dtype.width()
        )));
    }
    let data = match dtype {
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::from_vec(&shape, data)
}

pub fn write_blob(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    std::fs::write(path, encode(t, dtype)).map_err(|e| FurnError::io(path.display(), e))
}

pub fn read_blob(path: &Path, dtype: Dtype) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|_| FurnError::MissingWeightFile(path.to_path_buf()))?;
    decode(&bytes, dtype)
}

/// Writes every tensor of `tensors` into `dir` plus `manifest.json` mapping
/// name → shape.
pub fn write_tensor_dir(dir: &Path, tensors: &BTreeMap<String, Tensor>, dtype: Dtype) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| FurnError::io(dir.display(), e))?;
    let mut manifest = BTreeMap::new();
    for (name, t) in tensors {
        write_blob(&dir.join(blob_file_name(name)), t, dtype)?;
        manifest.insert(name.clone(), t.shape().to_vec());
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| FurnError::io(path.display(), e))
}

/// Reads a directory written by [`write_tensor_dir`], checking each blob's
/// shape against the manifest.
pub fn read_tensor_dir(dir: &Path, dtype: Dtype) -> Result<BTreeMap<String, Tensor>> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|_| FurnError::MissingWeightFile(path.clone()))?;
    let manifest: BTreeMap<String, Vec<usize>> = serde_json::from_str(&text)?;
    read_listed(dir, &manifest, dtype)
}

pub(crate) fn read_listed(
    dir: &Path,
    manifest: &BTreeMap<String, Vec<usize>>,
    dtype: Dtype,
) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (name, shape) in manifest {
        let t = read_blob(&dir.join(blob_file_name(name)), dtype)?;
        if t.shape() != shape.as_slice() {
            return Err(FurnError::ShapeMismatch(format!(
                "tensor `{name}` has shape {:?}, manifest says {shape:?}",
                t.shape()
            )));
        }
        out.insert(name.clone(), t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_blobs_round_trip_bit_exactly(
            dims in proptest::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n as u64).map(|i| f64::from_bits(seed.wrapping_mul(i + 1) >> 2)).collect();
            let t = Tensor::from_vec(&dims, data).unwrap();
            let back = decode(&encode(&t, Dtype::F64), Dtype::F64).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn truncated_blobs_are_rejected() {
        let t = Tensor::full(&[2, 3], 1.5);
        let bytes = encode(&t, Dtype::F32);
        assert_eq!(decode(&bytes, Dtype::F32).unwrap(), t);
        assert!(decode(&bytes[..bytes.len() - 1], Dtype::F32).is_err());
        assert!(decode(&bytes[..2], Dtype::F32).is_err());
    }

    #[test]
    fn directory_round_trip_and_missing_blob() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = BTreeMap::new();
        m.insert("a/w".to_string(), Tensor::full(&[2, 2], 0.25));
        m.insert("b".to_string(), Tensor::full(&[3], -1.0));
        write_tensor_dir(dir.path(), &m, Dtype::F32).unwrap();
        assert_eq!(read_tensor_dir(dir.path(), Dtype::F32).unwrap(), m);
        std::fs::remove_file(dir.path().join("b.bin")).unwrap();
        assert!(matches!(
            read_tensor_dir(dir.path(), Dtype::F32),
            Err(FurnError::MissingWeightFile(_))
        ));
    }
}
