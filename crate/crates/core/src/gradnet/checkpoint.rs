//! On-disk parameter checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` and `params.bin`.
//! The blob is every tensor's data as contiguous little-endian `f32`, in
//! manifest order; each manifest entry records its group, name, shape, byte
//! offset, dtype and the store version at save time. Loading reproduces the
//! stores bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "qbarrier-checkpoint";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub dtype: String,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    /// Caller-defined metadata (config, digests, training progress).
    pub meta: serde_json::Value,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stores: Vec<ParamStore>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn store(&self, group: &str) -> Result<&ParamStore> {
        self.stores
            .iter()
            .find(|s| s.group() == group)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter group {group}")))
    }
}

/// SHA-256 over the parameter content of `stores`, in order.
pub fn params_digest<'a>(stores: impl IntoIterator<Item = &'a ParamStore>) -> String {
    let mut h = Sha256::new();
    for s in stores {
        s.hash_into(&mut h);
    }
    hex::encode(h.finalize())
}

pub fn save(dir: &Path, stores: &[&ParamStore], meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for s in stores {
        for t in s.tensors() {
            tensors.push(ManifestEntry {
                group: s.group().to_string(),
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset: blob.len() as u64,
                dtype: "f32le".into(),
                version: s.version(),
            });
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        format_version: FORMAT_VERSION,
        meta,
        tensors,
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT || manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} v{}",
            manifest.format, manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let mut stores: Vec<ParamStore> = Vec::new();
    for e in &manifest.tensors {
        if e.dtype != "f32le" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * numel;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("{}/{} runs past the blob", e.group, e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if stores.last().is_none_or(|s| s.group() != e.group) {
            stores.push(ParamStore::new(&e.group));
        }
        let store = stores.last_mut().unwrap();
        store.add(&e.name, &e.shape, data)?;
        store.set_version(e.version);
    }
    Ok(Checkpoint {
        stores,
        meta: manifest.meta,
    })
}

/// SHA-256 over the manifest and blob files as written.
pub fn file_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(dir.join(MANIFEST_FILE))?);
    h.update(fs::read(dir.join(BLOB_FILE))?);
    Ok(hex::encode(h.finalize()))
}
