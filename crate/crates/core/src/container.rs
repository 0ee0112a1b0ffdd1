//! Binary tensor container.
//!
//! Layout: the 8-byte magic `PAIRINV1`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then the raw little-endian payloads. Header offsets are
//! relative to the first payload byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"PAIRINV1";

#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }

    /// Wraps a tensor of either precision without changing its values.
    pub fn of<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    /// Convert to the requested precision.
    pub fn to<T: Real>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, AnyTensor>,
    pub meta: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: Value,
    tensors: Vec<Entry>,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Container {
            tensors: BTreeMap::new(),
            meta,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: impl Into<AnyTensor>) {
        self.tensors.insert(name.into(), t.into());
    }

    pub fn get(&self, name: &str) -> Result<&AnyTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format {
                offset: 0,
                msg: format!("missing tensor '{name}'"),
            })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                dtype: t.dtype(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += (t.shape().iter().product::<usize>() * t.dtype().size()) as u64;
        }
        // round-trip through Value so object keys come out sorted
        let header = serde_json::to_value(Header {
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            t.write(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < 12 {
            return Err(fmt(
                bytes.len(),
                format!("file has {} bytes, expected at least 12", bytes.len()),
            ));
        }
        if &bytes[..8] != MAGIC {
            return Err(fmt(0, "bad magic, not a PAIRINV1 container".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let start = 12 + hlen;
        if bytes.len() < start {
            return Err(fmt(
                bytes.len(),
                format!("header needs {start} bytes, file has {}", bytes.len()),
            ));
        }
        let header: Header = serde_json::from_slice(&bytes[12..start])
            .map_err(|e| fmt(12, format!("invalid header: {e}")))?;

        let payload = bytes.len() - start;
        let mut spans: Vec<(usize, usize, &str)> = Vec::new();
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let off = e.offset as usize;
            let end = off + n * e.dtype.size();
            if end > payload {
                return Err(fmt(
                    start + off,
                    format!(
                        "tensor '{}' needs {} bytes total, file has {}",
                        e.name,
                        start + end,
                        bytes.len()
                    ),
                ));
            }
            spans.push((off, end, &e.name));
            let raw = &bytes[start + off..start + end];
            let t = match e.dtype {
                DType::F32 => AnyTensor::F32(decode::<f32>(&e.shape, raw)?),
                DType::F64 => AnyTensor::F64(decode::<f64>(&e.shape, raw)?),
            };
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(fmt(12, format!("duplicate tensor '{}'", e.name)));
            }
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(fmt(
                    start + w[1].0,
                    format!("tensors '{}' and '{}' overlap", w[0].2, w[1].2),
                ));
            }
        }
        Ok(Container {
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Container::from_bytes(&bytes)
    }
}

fn decode<T: Real>(shape: &[usize], raw: &[u8]) -> Result<Tensor<T>> {
    let size = T::DTYPE.size();
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

/// Write named tensors with metadata.
pub fn save_container(path: impl AsRef<Path>, c: &Container) -> Result<()> {
    c.save(path)
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Container> {
    Container::load(path)
}
