//! Single-file tensor archive.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic b"CDNETCK\0"
//! offset 8   u32       header length N
//! offset 12  N bytes   UTF-8 JSON header
//! then       payloads, one per header tensor entry, in header order;
//!            rows*cols values of the header dtype, row-major
//! ```
//!
//! Header JSON:
//!
//! ```json
//! {"format_version": 1, "dtype": "f64" | "f32", "config": <any>,
//!  "meta": <any>, "tensors": [{"name": "...", "shape": [rows, cols]}, ...]}
//! ```
//!
//! Tensors are written in lexicographic name order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Mat;

pub const MAGIC: &[u8; 8] = b"CDNETCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: DType,
    #[serde(default)]
    config: serde_json::Value,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub tensors: ParamStore,
}

impl Checkpoint {
    pub fn new(tensors: ParamStore) -> Self {
        Self {
            config: serde_json::Value::Null,
            meta: serde_json::Value::Null,
            tensors,
        }
    }
}

pub fn to_bytes(ckpt: &Checkpoint, dtype: DType) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype,
        config: ckpt.config.clone(),
        meta: ckpt.meta.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(n, m)| TensorEntry {
                name: n.clone(),
                shape: [m.rows, m.cols],
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let payload: usize = ckpt.tensors.num_scalars() * dtype.width();
    let mut out = Vec::with_capacity(12 + header.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, m) in ckpt.tensors.iter() {
        for &v in &m.data {
            match dtype {
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    let width = header.dtype.width();
    let mut offset = 12 + hlen;
    let mut tensors = ParamStore::new();
    for entry in &header.tensors {
        let [rows, cols] = entry.shape;
        let n = rows * cols;
        let raw = bytes
            .get(offset..offset + n * width)
            .ok_or_else(|| bad(format!("truncated payload for `{}`", entry.name)))?;
        let data = match header.dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        tensors.insert(entry.name.clone(), Mat::from_vec(rows, cols, data));
        offset += n * width;
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(Checkpoint {
        config: header.config,
        meta: header.meta,
        tensors,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint, dtype: DType) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = to_bytes(ckpt, dtype);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
