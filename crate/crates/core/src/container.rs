//! Named-tensor checkpoint container.
//!
//! ```text
//! file    := header_len header data
//! header_len: u64, little-endian
//! header  := UTF-8 JSON object {
//!     "__metadata__": { "key": "value", ... },          (optional)
//!     "<tensor name>": {
//!         "dtype": "F32" | "F64",
//!         "shape": [d0, d1, ...],
//!         "data_offsets": [start, end]                  (relative to data)
//!     }, ...
//! }
//! data    := little-endian row-major scalars
//! ```
//!
//! Readers reject duplicate names, unknown dtypes, byte ranges that overlap
//! or leave gaps, and shapes inconsistent with their byte length. Writers
//! emit tensors in name order with the header padded by spaces to a multiple
//! of 8 bytes, so identical containers serialize to identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const METADATA_KEY: &str = "__metadata__";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    fn to_le_bytes(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn from_le_bytes(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, TensorData::F32(values))
    }

    pub fn f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, TensorData::F64(values))
    }

    /// Casts `values` to `dtype` and wraps them.
    pub fn from_f64_values(dtype: Dtype, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let data = match dtype {
            Dtype::F32 => TensorData::F32(values.into_iter().map(|x| x as f32).collect()),
            Dtype::F64 => TensorData::F64(values),
        };
        Tensor::new(shape, data)
    }

    pub fn from_matrix(dtype: Dtype, m: &Matrix) -> Self {
        let (r, c) = m.shape();
        Tensor::from_f64_values(dtype, vec![r, c], m.to_row_major()).expect("shape matches")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|x| f64::from(*x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// A genuine matrix: two dimensions, both larger than one. Everything else
    /// (scalars, vectors, `1×n` rows, higher-order tensors) is merged by
    /// averaging.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2 && self.shape.iter().all(|d| *d > 1)
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "tensor of shape {:?} is not two-dimensional",
                self.shape
            )));
        }
        Matrix::from_row_major(self.shape[0], self.shape[1], &self.to_f64_vec())
    }
}

/// Ordered collection of named tensors with string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: Dtype,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// JSON object kept as an ordered list so duplicate keys can be detected.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.to_string(),
                serde_json::to_value(&self.metadata).expect("string map serializes"),
            );
        }
        let mut data = Vec::new();
        for (name, tensor) in &self.tensors {
            if name == METADATA_KEY {
                return Err(Error::invalid(format!("tensor name `{METADATA_KEY}` is reserved")));
            }
            let start = data.len();
            tensor.data.to_le_bytes(&mut data);
            let entry = HeaderEntry {
                dtype: tensor.dtype(),
                shape: tensor.shape.clone(),
                data_offsets: [start, data.len()],
            };
            header.insert(name.clone(), serde_json::to_value(entry).expect("entry serializes"));
        }
        let mut header_bytes = serde_json::to_vec(&header).expect("header serializes");
        while !header_bytes.len().is_multiple_of(8) {
            header_bytes.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header_bytes.len() + data.len());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::malformed("file shorter than the 8-byte length prefix"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(8))
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| Error::malformed(format!("header length {header_len} exceeds file size")))?;
        let header_text = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| Error::malformed(format!("header is not UTF-8: {e}")))?;
        let raw: RawHeader = serde_json::from_str(header_text)
            .map_err(|e| Error::malformed(format!("header is not a JSON object: {e}")))?;
        let data = &bytes[header_end..];

        let mut container = TensorContainer::new();
        let mut seen = std::collections::BTreeSet::new();
        let mut ranges: Vec<(usize, usize, String)> = Vec::new();
        for (name, value) in raw.0 {
            if !seen.insert(name.clone()) {
                return Err(Error::malformed(format!("duplicate entry `{name}`")));
            }
            if name == METADATA_KEY {
                container.metadata = serde_json::from_value(value)
                    .map_err(|e| Error::malformed(format!("metadata must map strings to strings: {e}")))?;
                continue;
            }
            let entry: HeaderEntry = serde_json::from_value(value)
                .map_err(|e| Error::malformed(format!("entry `{name}`: {e}")))?;
            let [start, end] = entry.data_offsets;
            if start > end {
                return Err(Error::malformed(format!("entry `{name}`: inverted byte range")));
            }
            let numel = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .ok_or_else(|| Error::malformed(format!("entry `{name}`: shape overflows")))?;
            let nbytes = numel
                .checked_mul(entry.dtype.size())
                .ok_or_else(|| Error::malformed(format!("entry `{name}`: shape overflows")))?;
            if end - start != nbytes {
                return Err(Error::malformed(format!(
                    "entry `{name}`: byte range {} does not match shape {:?}",
                    end - start,
                    entry.shape
                )));
            }
            if end > data.len() {
                return Err(Error::malformed(format!(
                    "entry `{name}`: data truncated ({} of {end} bytes present)",
                    data.len()
                )));
            }
            let tensor = Tensor {
                shape: entry.shape,
                data: TensorData::from_le_bytes(entry.dtype, &data[start..end]),
            };
            ranges.push((start, end, name.clone()));
            container.tensors.insert(name, tensor);
        }

        ranges.sort();
        let mut cursor = 0usize;
        for (start, end, name) in &ranges {
            if *start < cursor {
                return Err(Error::malformed(format!("entry `{name}` overlaps its predecessor")));
            }
            if *start > cursor {
                return Err(Error::malformed(format!("gap before entry `{name}`")));
            }
            cursor = *end;
        }
        if cursor != data.len() {
            return Err(Error::malformed(format!(
                "{} trailing bytes not covered by any tensor",
                data.len() - cursor
            )));
        }
        Ok(container)
    }
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    TensorContainer::from_bytes(&bytes)
}

pub fn write_container(container: &TensorContainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = container.to_bytes()?;
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
