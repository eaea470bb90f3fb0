//! Checkpoints: a JSON manifest plus an adjacent little-endian `f64` payload.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const FORMAT: &str = "stgd-checkpoint-v1";
pub const FROZEN: &str = "frozen/";
pub const TRAINABLE: &str = "trainable/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Group prefix plus parameter name, e.g. `trainable/heads.fuse.weight`.
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

impl ManifestEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn param_name(&self) -> &str {
        &self.name[self.group.len()..]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub payload: String,
    pub config: TrainConfig,
    pub tensors: Vec<ManifestEntry>,
}

/// A loaded checkpoint: its manifest and one tensor per entry.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor>,
}

pub fn payload_path(manifest_path: &Path) -> Result<PathBuf> {
    let p = manifest_path.with_extension("bin");
    if p == manifest_path {
        return Err(Error::Validation(
            "checkpoint manifest must not use the .bin extension".into(),
        ));
    }
    Ok(p)
}

fn group_of(t: &Tensor) -> &'static str {
    if t.requires_grad() {
        TRAINABLE
    } else {
        FROZEN
    }
}

pub fn build_manifest(cfg: &TrainConfig, store: &ParamStore, payload: &str) -> Manifest {
    let mut offset = 0;
    let tensors = store
        .iter()
        .map(|(_, name, t)| {
            let group = group_of(t);
            let e = ManifestEntry {
                name: format!("{group}{name}"),
                group: group.into(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel() * 8;
            e
        })
        .collect();
    Manifest {
        format: FORMAT.into(),
        payload: payload.into(),
        config: cfg.clone(),
        tensors,
    }
}

pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, store: &ParamStore) -> Result<()> {
    let payload = payload_path(path)?;
    let file_name = payload
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_string();
    let manifest = build_manifest(cfg, store, &file_name);
    let mut bytes = Vec::with_capacity(store.count_total() * 8);
    for (_, _, t) in store.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(&payload, bytes)?;
    std::fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let text = std::fs::read_to_string(path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Load(format!(
            "unknown checkpoint format `{}`",
            manifest.format
        )));
    }
    manifest.config.validate()?;
    let payload_file = path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.payload);
    let bytes = std::fs::read(&payload_file)?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0;
    let mut seen = std::collections::HashSet::new();
    for e in &manifest.tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Load(format!("duplicate tensor `{}`", e.name)));
        }
        if (e.group != FROZEN && e.group != TRAINABLE) || !e.name.starts_with(&e.group) {
            return Err(Error::Load(format!(
                "tensor `{}` has invalid group `{}`",
                e.name, e.group
            )));
        }
        if e.offset != expected_offset {
            return Err(Error::Load(format!(
                "tensor `{}` has offset {}, expected {expected_offset}",
                e.name, e.offset
            )));
        }
        let end = e.offset + e.numel() * 8;
        let raw = bytes
            .get(e.offset..end)
            .ok_or_else(|| Error::Load(format!("payload too short for tensor `{}`", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&e.shape, data)
            .map_err(|err| Error::Load(format!("tensor `{}`: {err}", e.name)))?;
        tensors.push(t.with_requires_grad(e.group == TRAINABLE));
        expected_offset = end;
    }
    if expected_offset != bytes.len() {
        return Err(Error::Load(format!(
            "payload has {} trailing bytes",
            bytes.len() - expected_offset
        )));
    }
    Ok(ModelCheckpoint { manifest, tensors })
}

impl ModelCheckpoint {
    /// Copies every checkpoint tensor into the same-named parameter of
    /// `store`. Names, groups and shapes must all agree.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.manifest.tensors.len() != store.len() {
            return Err(Error::Load(format!(
                "checkpoint has {} tensors, model has {}",
                self.manifest.tensors.len(),
                store.len()
            )));
        }
        for (e, t) in self.manifest.tensors.iter().zip(&self.tensors) {
            let id = store
                .lookup(e.param_name())
                .ok_or_else(|| Error::Load(format!("model has no tensor `{}`", e.name)))?;
            let target = store.get_mut(id);
            if target.shape() != t.shape() {
                return Err(Error::Load(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    e.name,
                    t.shape(),
                    target.shape()
                )));
            }
            if group_of(target) != e.group {
                return Err(Error::Load(format!(
                    "tensor `{}` is in the wrong group",
                    e.name
                )));
            }
            target.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn count(&self, group: &str) -> usize {
        self.manifest
            .tensors
            .iter()
            .filter(|e| e.group == group)
            .map(ManifestEntry::numel)
            .sum()
    }
}
