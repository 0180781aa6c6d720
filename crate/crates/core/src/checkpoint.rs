//! Versioned binary weight container.
//!
//! Layout: the 8-byte magic `FSARCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then the concatenated
//! little-endian f32 data of every tensor in header order, and finally the
//! SHA-256 of everything before it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FSARCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ContainerHeader {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Free-form metadata plus named f32 tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            tensors: ParamStore::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ContainerHeader {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 4 * self.tensors.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if raw.len() < 52 || &raw[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let (raw, digest) = raw.split_at(raw.len() - 32);
        if Sha256::digest(raw).as_slice() != digest {
            return Err(bad("digest mismatch (corrupt or truncated file)"));
        }
        let version = u32::from_le_bytes(raw[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(raw[12..20].try_into().unwrap()) as usize;
        let body = raw.get(20..).ok_or_else(|| bad("truncated"))?;
        let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: ContainerHeader =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut data = &body[hlen..];
        let mut tensors = ParamStore::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < 4 * n {
                return Err(Error::Checkpoint(format!("tensor {} is truncated", entry.name)));
            }
            let values = data[..4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            data = &data[4 * n..];
            tensors.push(entry.name, Tensor::from_vec(&entry.shape, values));
        }
        if !data.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&raw)
    }

    /// Collect all tensors whose name starts with `prefix`, prefix removed.
    pub fn section(&self, prefix: &str) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        for (n, t) in self.tensors.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.push(rest, t.clone());
            }
        }
        out
    }
}

/// Check that `store` has exactly the expected names and shapes.
pub fn check_layout(store: &ParamStore<f32>, expected: &[(String, Vec<usize>)]) -> Result<()> {
    if store.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            store.len()
        )));
    }
    for ((name, t), (en, es)) in store.iter().zip(expected) {
        if name != en || t.shape() != es.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {:?} does not match expected {en} {es:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut ck = Checkpoint::new(serde_json::json!({"kind": "test", "n": 3}));
        ck.tensors.push("a.w", Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]));
        ck.tensors.push("b", Tensor::from_vec(&[1], vec![f32::MAX]));
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        let mut wrong = bytes;
        wrong[8] = 9;
        assert!(Checkpoint::from_bytes(&wrong).is_err());
    }
}
