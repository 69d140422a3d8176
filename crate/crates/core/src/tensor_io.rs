//! `.tns` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [8 bytes]  magic "BEVTNS01"
//! [8 bytes]  u64 header length N
//! [N bytes]  UTF-8 JSON header
//! [...]      payload: tensors back to back, row-major, little-endian
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "offset"}` where
//! `offset` is the byte position inside the payload. An optional
//! `"__metadata__"` entry holds string key/value pairs. Tensors are written in
//! name order, so identical contents always serialize to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BEVTNS01";
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * self.data.dtype().size()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, Tensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(Error::Format(format!("`{METADATA_KEY}` is reserved")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, value: &Array2<f64>) -> Result<()> {
        let data = value.as_standard_layout().iter().copied().collect();
        self.insert(name, Tensor::new(vec![value.nrows(), value.ncols()], TensorData::F64(data))?)
    }

    pub fn insert_f64_nd(&mut self, name: impl Into<String>, value: &ArrayD<f64>) -> Result<()> {
        let data = value.as_standard_layout().iter().copied().collect();
        self.insert(name, Tensor::new(value.shape().to_vec(), TensorData::F64(data))?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// An `f64` tensor as a matrix; 1-D tensors become a single row and
    /// higher-rank tensors keep their first axis as rows.
    pub fn get_f64(&self, name: &str) -> Result<Array2<f64>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` not in container")))?;
        let TensorData::F64(data) = &t.data else {
            return Err(Error::Format(format!(
                "tensor `{name}` is {:?}, expected f64",
                t.data.dtype()
            )));
        };
        let (rows, cols) = match t.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
        };
        Ok(Array2::from_shape_vec((rows, cols), data.clone()).expect("validated shape"))
    }

    pub fn get_f64_nd(&self, name: &str) -> Result<ArrayD<f64>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` not in container")))?;
        match &t.data {
            TensorData::F64(data) => Ok(ArrayD::from_shape_vec(IxDyn(&t.shape), data.clone())
                .expect("validated shape")),
            other => Err(Error::Format(format!(
                "tensor `{name}` is {:?}, expected f64",
                other.dtype()
            ))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.into(), serde_json::to_value(&self.metadata)?);
        }
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let entry = Entry {
                dtype: t.data.dtype(),
                shape: t.shape.clone(),
                offset,
            };
            header.insert(name.clone(), serde_json::to_value(entry)?);
            offset += t.byte_len();
        }
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            t.data.write_le(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format(format!(
                "container truncated: {} bytes, need at least 16",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8]),
                std::str::from_utf8(MAGIC).unwrap()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "header length {header_len} exceeds file size {}",
                    bytes.len()
                ))
            })?;
        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&bytes[16..payload_start])
                .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut container = TensorContainer::new();
        let mut spans = Vec::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                container.metadata = serde_json::from_value(value)
                    .map_err(|e| Error::Format(format!("bad metadata: {e}")))?;
                continue;
            }
            let entry: Entry = serde_json::from_value(value)
                .map_err(|e| Error::Format(format!("bad header entry `{name}`: {e}")))?;
            let count: usize = entry.shape.iter().product();
            let len = count * entry.dtype.size();
            let end = entry
                .offset
                .checked_add(len)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| {
                    Error::Format(format!(
                        "tensor `{name}` spans bytes {}..{} of a {}-byte payload",
                        entry.offset,
                        entry.offset + len,
                        payload.len()
                    ))
                })?;
            spans.push((entry.offset, end, name.clone()));
            let data = TensorData::read_le(entry.dtype, &payload[entry.offset..end]);
            container
                .tensors
                .insert(name, Tensor::new(entry.shape, data)?);
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Format(format!(
                    "tensors `{}` and `{}` overlap",
                    w[0].2, w[1].2
                )));
            }
        }
        let used: usize = spans.iter().map(|(s, e, _)| e - s).sum();
        if used != payload.len() {
            return Err(Error::Format(format!(
                "payload is {} bytes but tensors account for {used}",
                payload.len()
            )));
        }
        Ok(container)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
