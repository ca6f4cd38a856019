//! Checkpoints are a JSON manifest at `path` plus a blob file at
//! `<path>.bin` holding every tensor in the raw blob format, back to back.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::TrainSchedule;
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::nets::{ArchConfig, Network};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_FORMAT: &str = "shiftnet-checkpoint-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: [usize; 4],
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub name: String,
    pub config: ArchConfig,
    pub seed: u64,
    pub iteration: usize,
    pub schedule: Option<TrainSchedule>,
    pub blob: String,
    pub blob_bytes: u64,
    pub entries: Vec<ManifestEntry>,
}

pub fn blob_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".bin");
    PathBuf::from(s)
}

/// Writes every parameter and buffer as 32-bit reals.
pub fn save_checkpoint<T: Real>(
    net: &Network<T>,
    path: &Path,
    iteration: usize,
    schedule: Option<&TrainSchedule>,
) -> Result<Manifest> {
    let tensors = net
        .params()
        .into_iter()
        .map(|p| (p.name, EntryKind::Param, p.value.cast::<f32>()))
        .chain(
            net.buffers()
                .into_iter()
                .map(|b| (b.name, EntryKind::Buffer, b.value.cast::<f32>())),
        );
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, kind, t) in tensors {
        let offset = blob.len() as u64;
        t.write_blob(&mut blob)?;
        entries.push(ManifestEntry {
            name,
            kind,
            shape: t.shape().dims(),
            offset,
            bytes: t.blob_len() as u64,
        });
    }
    let bpath = blob_path(path);
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        name: net.name().to_string(),
        config: net.config.clone(),
        seed: net.seed,
        iteration,
        schedule: schedule.cloned(),
        blob: bpath
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_bytes: blob.len() as u64,
        entries,
    };
    fs::write(&bpath, &blob)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", m.format)));
    }
    Ok(m)
}

fn ckpt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Rebuilds the network from the manifest and restores every tensor bit-exactly.
pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, Manifest)> {
    let manifest = read_manifest(path)?;
    let bpath = path
        .parent()
        .map_or_else(|| PathBuf::from(&manifest.blob), |d| d.join(&manifest.blob));
    let blob = fs::read(&bpath)?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(ckpt(format!(
            "blob is {} bytes, manifest expects {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut by_name: HashMap<&str, &ManifestEntry> = HashMap::new();
    for e in &manifest.entries {
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(ckpt(format!("duplicate entry {}", e.name)));
        }
    }
    let mut net = Network::<f32>::new(manifest.config.clone(), manifest.seed)?;
    let read = |name: &str, kind: EntryKind, target: &mut Tensor<f32>| -> Result<()> {
        let e = by_name
            .get(name)
            .ok_or_else(|| ckpt(format!("missing entry {name}")))?;
        if e.kind != kind {
            return Err(ckpt(format!("entry {name} has kind {:?}, expected {kind:?}", e.kind)));
        }
        let end = e
            .offset
            .checked_add(e.bytes)
            .filter(|&end| end <= blob.len() as u64)
            .ok_or_else(|| ckpt(format!("entry {name} lies outside the blob")))?;
        let mut slice = &blob[e.offset as usize..end as usize];
        let t = Tensor::<f32>::read_blob(&mut slice)
            .map_err(|err| ckpt(format!("entry {name}: {err}")))?;
        if !slice.is_empty() || t.shape() != target.shape() || t.shape().dims() != e.shape {
            return Err(ckpt(format!(
                "entry {name}: stored shape {} does not match network shape {}",
                t.shape(),
                target.shape()
            )));
        }
        *target = t;
        Ok(())
    };
    let mut restored = 0;
    for p in net.params_mut() {
        read(&p.name, EntryKind::Param, p.value)?;
        restored += 1;
    }
    for (name, value) in net.buffers_mut() {
        read(&name, EntryKind::Buffer, value)?;
        restored += 1;
    }
    if restored != manifest.entries.len() {
        return Err(ckpt(format!(
            "manifest lists {} entries, network has {restored}",
            manifest.entries.len()
        )));
    }
    Ok((net, manifest))
}
