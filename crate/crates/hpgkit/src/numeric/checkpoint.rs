//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, little-endian u32 manifest length, manifest JSON,
//! then one contiguous blob of little-endian 64-bit floats. The manifest
//! records the format version, a caller-supplied metadata document (task,
//! configuration, vocabularies, hash), and per-parameter (name, shape,
//! offset) entries pointing into the blob.

use super::{ParamStore, Tensor};
use crate::util::write_atomic;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HPGKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("corrupt manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, counted in 8-byte elements.
    offset: usize,
}

pub fn save_checkpoint(
    path: &Path,
    meta: &serde_json::Value,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::with_capacity(store.scalar_count() * 8);
    let mut offset = 0;
    for (name, tensor) in store.iter() {
        entries.push(Entry { name: name.clone(), shape: tensor.shape.clone(), offset });
        offset += tensor.numel();
        for v in &tensor.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { version: CHECKPOINT_VERSION, meta: meta.clone(), entries };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + 4 + manifest_bytes.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&blob);
    write_atomic(path, &out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParamStore), CheckpointError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let blob_start = 12 + manifest_len;
    if bytes.len() < blob_start {
        return Err(CheckpointError::Corrupt("manifest extends past end of file".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..blob_start])?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(manifest.version));
    }
    let blob = &bytes[blob_start..];
    if blob.len() % 8 != 0 {
        return Err(CheckpointError::Corrupt("blob length is not a multiple of 8".into()));
    }
    let total = blob.len() / 8;
    let mut store = ParamStore::new();
    for entry in manifest.entries {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset.checked_add(numel).filter(|&e| e <= total).ok_or_else(|| {
            CheckpointError::Corrupt(format!("entry {} overruns the blob", entry.name))
        })?;
        let mut data = Vec::with_capacity(numel);
        for i in entry.offset..end {
            data.push(f64::from_le_bytes(blob[i * 8..(i + 1) * 8].try_into().unwrap()));
        }
        let tensor = Tensor::new(entry.shape, data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if store.contains(&entry.name) {
            return Err(CheckpointError::Corrupt(format!("duplicate entry {}", entry.name)));
        }
        store.insert(entry.name, tensor);
    }
    Ok((manifest.meta, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use serde_json::json;

    fn sample_store() -> ParamStore {
        let mut rng = seeded_rng(5, "ckpt-test", 0);
        let mut store = ParamStore::new();
        store.insert("embed.value", Tensor::normal(vec![7, 4], 0.02, &mut rng));
        store.insert("enc.l0.h0.k", Tensor::xavier_uniform(4, 2, &mut rng));
        store.insert("head.bias", Tensor::vector(vec![0.0, -1.5, 3.25]));
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        let meta = json!({"task": "classify", "config_hash": "abc123", "classes": ["a", "b"]});
        save_checkpoint(&path, &meta, &store).unwrap();
        let (loaded_meta, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_eq!(loaded, store);
        // Same insertion order after reload.
        let names: Vec<&String> = loaded.names().collect();
        assert_eq!(names, vec!["embed.value", "enc.l0.h0.k", "head.bias"]);
    }

    #[test]
    fn non_checkpoint_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &serde_json::Value::Null, &sample_store()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = ParamStore::new();
        save_checkpoint(&path, &serde_json::Value::Null, &store).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Bump the version field inside the manifest JSON.
        let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest = String::from_utf8(bytes[12..12 + manifest_len].to_vec()).unwrap();
        let bumped = manifest.replace("\"version\":1", "\"version\":9");
        bytes.splice(12..12 + manifest_len, bumped.into_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Version(9))));
    }
}
