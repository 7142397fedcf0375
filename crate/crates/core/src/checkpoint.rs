//! Single-file container of named `f32` arrays plus a JSON metadata block.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"SSSEGCKP"  magic
//! u32          format version
//! u64          header length in bytes
//! [u8]         header: JSON {"meta": .., "tensors": [{"name", "shape"}, ..]}
//! [f32]        tensor data, concatenated in header order
//! u32          CRC-32 of every preceding byte
//! ```
//!
//! Files are written to a temporary sibling and renamed into place.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use ssseg_nn::{ParamStore, Tensor};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SSSEGCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptFile { path: String, reason: String },
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint does not fit the model: {}", .0.join("; "))]
    ShapeMismatch(Vec<String>),
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_container(path: &Path, meta: &Value, tensors: &[(&str, &Tensor)]) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let header = Header {
        meta: meta.clone(),
        tensors: tensors.iter().map(|(n, t)| Entry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
    };
    let header = serde_json::to_vec(&header).expect("header is plain JSON");
    let numel: usize = tensors.iter().map(|(_, t)| t.numel()).sum();
    let mut buf = Vec::with_capacity(8 + 4 + 8 + header.len() + numel * 4 + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn read_container(path: &Path) -> Result<Container, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    let corrupt = |reason: &str| CheckpointError::CorruptFile { path: path.display().to_string(), reason: reason.into() };
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_bytes = body.get(20..20 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| corrupt(&format!("header: {e}")))?;
    let mut data = &body[20 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if data.len() < n * 4 {
            return Err(corrupt("truncated tensor data"));
        }
        let values = data[..n * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        data = &data[n * 4..];
        tensors.push((e.name, Tensor::from_vec(&e.shape, values).map_err(|e| corrupt(&e.to_string()))?));
    }
    if !data.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Container { meta: header.meta, tensors })
}

/// Copy `tensors` into same-named parameters of `store`. Shape mismatches
/// are collected and reported together; nothing is written unless all fit.
/// With `require_all`, every store parameter must be present.
pub fn load_params(
    store: &mut ParamStore,
    tensors: &[(String, Tensor)],
    require_all: bool,
) -> Result<usize, CheckpointError> {
    let mut problems = Vec::new();
    let mut matched = Vec::new();
    for (name, t) in tensors {
        match store.find(name) {
            Some(id) if store.value(id).shape() == t.shape() => matched.push((id, t)),
            Some(id) => {
                problems.push(format!("{name}: checkpoint {:?} vs model {:?}", t.shape(), store.value(id).shape()))
            }
            None if require_all => problems.push(format!("{name}: not in model")),
            None => {}
        }
    }
    if require_all {
        for (_, p) in store.iter() {
            if !tensors.iter().any(|(n, _)| *n == p.name) {
                problems.push(format!("{}: missing from checkpoint", p.name));
            }
        }
    }
    if !problems.is_empty() {
        return Err(CheckpointError::ShapeMismatch(problems));
    }
    for (id, t) in &matched {
        store.set(*id, (*t).clone()).expect("shape checked");
    }
    Ok(matched.len())
}

/// All parameters, running statistics included, as container entries.
pub fn store_entries(store: &ParamStore) -> Vec<(&str, &Tensor)> {
    store.iter().map(|(_, p)| (p.name.as_str(), &*p.value)).collect()
}
