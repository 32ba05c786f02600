//! Tensor archive reader and writer.
//!
//! Layout:
//!   [8 bytes LE u64: header length N]
//!   [N bytes: UTF-8 JSON header]
//!   [raw data region]
//!
//! The header maps tensor names to `{"dtype", "shape", "data_offsets": [begin, end]}`,
//! offsets relative to the start of the data region. An optional `__metadata__`
//! entry holds string key/value pairs and is ignored on read.

use std::collections::BTreeMap;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

/// Storage element type. Everything is widened to `f32` on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    pub fn element_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    fn parse(tag: &str) -> Result<Self> {
        match tag {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
        }
    }
}

/// One named tensor, decoded to row-major `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    /// Dtype the tensor was (or will be) stored with.
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dtype: Dtype::F32,
            shape,
            data,
        }
    }

    pub fn with_dtype(mut self, dtype: Dtype) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub type TensorMap = BTreeMap<String, TensorRecord>;

#[derive(Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Reads and validates every tensor in the archive at `path`.
pub fn open_archive(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_archive(&bytes)
}

/// Parses an in-memory archive.
pub fn parse_archive(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < 8 {
        return Err(Error::ArchiveFormat(format!(
            "file is {} bytes, too short for the length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte slice"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(8))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::ArchiveFormat(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let header = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::ArchiveFormat(format!("header is not UTF-8: {e}")))?;
    let entries: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(header).map_err(|e| Error::ArchiveFormat(format!("header is not a JSON object: {e}")))?;
    let data = &bytes[header_end..];

    let mut map = TensorMap::new();
    for (name, value) in entries {
        if name == METADATA_KEY {
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::ArchiveFormat(format!("bad header entry for `{name}`: {e}")))?;
        let dtype = Dtype::parse(&entry.dtype)?;
        let [begin, end] = entry.data_offsets;
        if begin > end || end > data.len() {
            return Err(Error::ArchiveFormat(format!(
                "offsets [{begin}, {end}) of `{name}` fall outside the {}-byte data region",
                data.len()
            )));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::ArchiveFormat(format!("shape of `{name}` overflows")))?;
        let expected = numel * dtype.element_size();
        if end - begin != expected {
            return Err(Error::ArchiveFormat(format!(
                "`{name}` declares shape {:?} ({expected} bytes) but holds {} bytes",
                entry.shape,
                end - begin
            )));
        }
        let raw = &data[begin..end];
        let values = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        };
        map.insert(
            name.clone(),
            TensorRecord {
                name,
                dtype,
                shape: entry.shape,
                data: values,
            },
        );
    }
    Ok(map)
}

/// Serializes `tensors` in name order. Each record is stored with its own
/// dtype; `F16` records are narrowed with round-to-nearest-even.
pub fn encode_archive(tensors: &TensorMap) -> Result<Vec<u8>> {
    let mut header = serde_json::Map::new();
    let mut offset = 0usize;
    for (name, record) in tensors {
        if record.data.len() != record.numel() {
            return Err(Error::ArchiveFormat(format!(
                "`{name}` has {} values for shape {:?}",
                record.data.len(),
                record.shape
            )));
        }
        let len = record.numel() * record.dtype.element_size();
        header.insert(
            name.clone(),
            serde_json::json!({
                "dtype": record.dtype.tag(),
                "shape": record.shape,
                "data_offsets": [offset, offset + len],
            }),
        );
        offset += len;
    }
    let mut header_bytes = serde_json::to_vec(&header).expect("header serializes");
    // Pad so the data region starts 8-byte aligned.
    while !(8 + header_bytes.len()).is_multiple_of(8) {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for record in tensors.values() {
        match record.dtype {
            Dtype::F32 => {
                for v in &record.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F16 => {
                for v in &record.data {
                    out.extend_from_slice(&f16::from_f32(*v).to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn write_archive(path: impl AsRef<Path>, tensors: &TensorMap) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_archive(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
