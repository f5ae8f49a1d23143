//! `.ptck` checkpoint files and a content-addressed checkpoint store.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PTCK\0" | u64 header length | JSON header | payload
//! ```
//!
//! The header carries the format version, model config, provenance, and a
//! tensor table `{name, dtype, shape, offset, length}` in canonical-name order.
//! The payload is the concatenation of the f32 buffers with no gaps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Checkpoint, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"PTCK\0";
pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "ptck";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),
    #[error("tensor names or shapes do not match the config: {0}")]
    NameSet(String),
    #[error("bad tensor layout: {0}")]
    Layout(String),
    #[error("truncated payload: need {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
}

type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    provenance: String,
    tensors: Vec<TensorEntry>,
}

/// Serialises a checkpoint to the `.ptck` byte layout.
pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut offset = 0;
    let tensors = ckpt
        .tensors()
        .iter()
        .map(|(name, t)| {
            let length = t.len() * 4;
            let e = TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                length,
            };
            offset += length;
            e
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        config: ckpt.config.clone(),
        provenance: ckpt.provenance.clone(),
        tensors,
    };
    let text = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + text.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    for t in ckpt.tensors().values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses and validates a `.ptck` byte buffer.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 8 {
        return Err(StoreError::CorruptHeader("missing header length".into()));
    }
    let header_len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if header_len > rest.len() {
        return Err(StoreError::CorruptHeader(format!(
            "header length {header_len} exceeds file size"
        )));
    }
    let raw: serde_json::Value = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| StoreError::CorruptHeader(e.to_string()))?;
    // Check the version before the schema so future headers get a precise error.
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| StoreError::CorruptHeader("missing format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(StoreError::UnsupportedVersion(version as u32));
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| StoreError::CorruptHeader(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| StoreError::CorruptHeader(e.to_string()))?;
    let payload = &rest[header_len..];

    let specs = header.config.tensor_specs();
    let mut expected: Vec<_> = specs.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
    expected.sort();
    let found: Vec<_> = header
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e.shape.as_slice()))
        .collect();
    if expected != found {
        let missing: Vec<_> = expected.iter().filter(|e| !found.contains(e)).collect();
        let extra: Vec<_> = found.iter().filter(|f| !expected.contains(f)).collect();
        return Err(StoreError::NameSet(format!(
            "expected but absent: {missing:?}; present but unexpected: {extra:?}"
        )));
    }

    let mut cursor = 0usize;
    let mut tensors = std::collections::BTreeMap::new();
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(StoreError::UnsupportedDtype(e.dtype.clone()));
        }
        let numel: usize = e.shape.iter().product();
        if e.offset != cursor || e.length != numel * 4 {
            return Err(StoreError::Layout(format!(
                "`{}` at offset {} length {}, expected offset {cursor} length {}",
                e.name,
                e.offset,
                e.length,
                numel * 4
            )));
        }
        let end = cursor + e.length;
        if end > payload.len() {
            return Err(StoreError::Truncated {
                expected: end,
                actual: payload.len(),
            });
        }
        let data = payload[cursor..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| StoreError::Layout(err.to_string()))?;
        tensors.insert(e.name.clone(), t);
        cursor = end;
    }
    if cursor != payload.len() {
        return Err(StoreError::Layout(format!(
            "{} trailing payload bytes",
            payload.len() - cursor
        )));
    }
    Checkpoint::new(header.config, tensors, header.provenance)
        .map_err(|e| StoreError::NameSet(e.to_string()))
}

/// Writes atomically: a temp file in the target directory, then rename.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&to_bytes(ckpt))?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| StoreError::Io(e.error))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

/// Content hash of config, tensor names/shapes, and payload. Provenance is
/// excluded so lineage annotations never change a checkpoint's identity.
pub fn digest(ckpt: &Checkpoint) -> String {
    let mut h = Sha256::new();
    h.update(b"ptck-digest-v1\0");
    h.update(serde_json::to_vec(&ckpt.config).expect("config serialises"));
    for (name, t) in ckpt.tensors() {
        h.update(name.as_bytes());
        h.update([0u8]);
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Digest of only the named tensors (used to compare component slices).
pub fn digest_tensors<'a>(ckpt: &Checkpoint, names: impl IntoIterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for name in names {
        if let Ok(t) = ckpt.tensor(name) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// Checkpoints stored under their digest: `<root>/<digest>.ptck`.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    root: PathBuf,
}

impl CheckpointStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn path_for(&self, digest: &str) -> PathBuf {
        self.root.join(format!("{digest}.{EXTENSION}"))
    }

    /// Stores `ckpt` unless an identical checkpoint is already present.
    pub fn put(&self, ckpt: &Checkpoint) -> Result<String> {
        let d = digest(ckpt);
        let path = self.path_for(&d);
        if !path.exists() {
            save(ckpt, &path)?;
        }
        Ok(d)
    }

    pub fn get(&self, digest: &str) -> Result<Checkpoint> {
        load(&self.path_for(digest))
    }

    pub fn contains(&self, digest: &str) -> bool {
        self.path_for(digest).exists()
    }
}
