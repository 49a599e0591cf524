//! Flat binary checkpoints.
//!
//! A checkpoint is two files sharing a stem: `<stem>.bin` holds every tensor's
//! values as little-endian `f64`, back to back; `<stem>.json` is a manifest
//! listing `{name, shape, offset}` per tensor, where `offset` is a byte
//! offset into the blob. Round trips are bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "synqt-f64le-v1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.detach()));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// Fetches `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    }

    pub fn to_bytes(&self) -> (Manifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        (
            Manifest {
                format: FORMAT.to_string(),
                entries,
            },
            blob,
        )
    }

    pub fn from_bytes(manifest: &Manifest, blob: &[u8]) -> Result<Self> {
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format `{}`",
                manifest.format
            )));
        }
        let mut tensors = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 8;
            if e.offset % 8 != 0 || end > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` spans bytes {}..{end} of a {}-byte blob",
                    e.name,
                    e.offset,
                    blob.len()
                )));
            }
            let data = blob[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t =
                Tensor::new(&e.shape, data).map_err(|err| Error::Checkpoint(err.to_string()))?;
            tensors.push((e.name.clone(), t));
        }
        Ok(Checkpoint { tensors })
    }

    /// Writes `<stem>.json` and `<stem>.bin`; returns the blob's SHA-256.
    pub fn save(&self, stem: &Path) -> Result<String> {
        let (manifest, blob) = self.to_bytes();
        if let Some(dir) = stem.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(with_ext(stem, "bin"), &blob)?;
        fs::write(
            with_ext(stem, "json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(hex::encode(Sha256::digest(&blob)))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(with_ext(stem, "json"))?)
            .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        let blob = fs::read(with_ext(stem, "bin"))?;
        Self::from_bytes(&manifest, &blob)
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}
