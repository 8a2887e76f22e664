//! Named parameter sets and their on-disk container.
//!
//! Layout: 8-byte magic `EATPARAM`, a little-endian `u64` header length, a JSON
//! header listing every parameter's name, shape, and byte offset into the data
//! region, then the data region itself as little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const PARAM_MAGIC: &[u8; 8] = b"EATPARAM";
pub const PARAM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a parameter file (bad magic)")]
    BadMagic,
    #[error("unsupported parameter file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("file truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("parameter mismatch: {0}")]
    Mismatch(String),
}

impl CheckpointError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), CheckpointError> {
        if self.names != other.names {
            return Err(CheckpointError::Mismatch("parameter names differ".into()));
        }
        for (name, (dst, src)) in self.names.iter().zip(self.tensors.iter_mut().zip(&other.tensors)) {
            if dst.shape() != src.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.len());
        let mut offset = 0usize;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            entries.push(ParamEntry { name: name.clone(), shape: t.shape().to_vec(), offset, len: t.len() });
            offset += t.len() * 8;
        }
        let header = ParamHeader { format: "eatlab-params".into(), version: PARAM_FORMAT_VERSION, params: entries };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated { needed: 16, have: bytes.len() });
        }
        if &bytes[..8] != PARAM_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize.checked_add(hlen).ok_or(CheckpointError::Truncated { needed: usize::MAX, have: bytes.len() })?;
        if bytes.len() < data_start {
            return Err(CheckpointError::Truncated { needed: data_start, have: bytes.len() });
        }
        let header: ParamHeader =
            serde_json::from_slice(&bytes[16..data_start]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.version != PARAM_FORMAT_VERSION {
            return Err(CheckpointError::Version { found: header.version, expected: PARAM_FORMAT_VERSION });
        }
        let data = &bytes[data_start..];
        let mut store = ParamStore::new();
        for entry in header.params {
            let end = entry.offset + entry.len * 8;
            if end > data.len() {
                return Err(CheckpointError::Truncated { needed: data_start + end, have: bytes.len() });
            }
            let values = data[entry.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape, values).map_err(|e| CheckpointError::Header(e.to_string()))?;
            store.push(entry.name, t);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    format: String,
    version: u32,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// Writes through a temporary sibling and renames, so readers never observe a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CheckpointError::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| CheckpointError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CheckpointError::io(&tmp, e))?;
    f.sync_all().ok();
    drop(f);
    fs::rename(&tmp, path).map_err(|e| CheckpointError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> ParamStore {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.push("w", Tensor::randn(&[3, 2], 1.0, &mut r));
        s.push("b", Tensor::randn(&[2], 1.0, &mut r));
        s
    }

    #[test]
    fn bytes_round_trip_bit_exact() {
        let s = sample();
        let back = ParamStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_bad_magic_truncation_and_version() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ParamStore::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            ParamStore::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + hlen].to_vec()).unwrap();
        let patched = header.replace("\"version\":1", "\"version\":7");
        assert_eq!(patched.len(), hlen);
        let mut v = bytes.clone();
        v[16..16 + hlen].copy_from_slice(patched.as_bytes());
        assert!(matches!(ParamStore::from_bytes(&v), Err(CheckpointError::Version { found: 7, .. })));
    }

    #[test]
    fn load_from_checks_shapes() {
        let mut a = sample();
        let mut b = ParamStore::new();
        b.push("w", Tensor::zeros(&[2, 3]));
        b.push("b", Tensor::zeros(&[2]));
        assert!(a.load_from(&b).is_err());
        let c = sample();
        a.get_mut(0).data_mut()[0] = 99.0;
        a.load_from(&c).unwrap();
        assert_eq!(a, c);
    }
}
