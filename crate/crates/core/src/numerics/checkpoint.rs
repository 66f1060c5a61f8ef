//! Parameter checkpoints: a JSON manifest plus a little-endian f64 blob.
//!
//! `<stem>.json` lists every tensor with its shape and byte offset into
//! `<stem>.bin`. Reloading reproduces each value bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    pub blob_bytes: u64,
    pub blob_sha256: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn encode(store: &ParamStore) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(store.num_scalars() * 8);
    let mut entries = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset: blob.len() as u64,
            trainable: p.trainable,
        });
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        entries,
        blob_bytes: blob.len() as u64,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    (manifest, blob)
}

pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<ParamStore> {
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::invalid(format!(
            "blob has {} bytes, manifest expects {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut store = ParamStore::new();
    for e in &manifest.entries {
        let count: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + count * 8;
        if end > blob.len() {
            return Err(Error::invalid(format!("tensor `{}` runs past the blob", e.name)));
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let id = store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
        store.set_trainable(id, e.trainable);
    }
    Ok(store)
}

/// Writes `<stem>.json` and `<stem>.bin`; returns the blob hash.
pub fn save(store: &ParamStore, stem: &Path) -> Result<String> {
    let (manifest, blob) = encode(store);
    let (json, bin) = paths(stem);
    if let Some(dir) = json.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&bin, &blob)?;
    fs::write(&json, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest.blob_sha256)
}

pub fn load(stem: &Path) -> Result<ParamStore> {
    let (json, bin) = paths(stem);
    let manifest: Manifest = serde_json::from_slice(&fs::read(json)?)?;
    let blob = fs::read(bin)?;
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(Error::invalid("checkpoint blob hash mismatch"));
    }
    decode(&manifest, &blob)
}

/// Loads a checkpoint into an existing store with the same layout.
pub fn load_into(store: &mut ParamStore, stem: &Path) -> Result<()> {
    let loaded = load(stem)?;
    for ((_, a), (_, b)) in store.iter().zip(loaded.iter()) {
        if a.name != b.name {
            return Err(Error::invalid(format!(
                "checkpoint parameter `{}` where `{}` was expected",
                b.name, a.name
            )));
        }
    }
    store.copy_from(&loaded)
}

/// Hash of the parameter values, used to bind artifacts together.
pub fn fingerprint(store: &ParamStore) -> String {
    encode(store).0.blob_sha256
}
