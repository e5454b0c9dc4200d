//! Manifest + flat little-endian parameter file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{AblationFlags, ArchConfig};
use super::net::NkmModel;
use crate::error::{Error, Result};
use crate::numerics::optim::ParamStore;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const FORMAT: &str = "nkm-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: String,
    pub seed: u64,
    pub config: Value,
    pub params: Vec<ParamMeta>,
    #[serde(default)]
    pub history: Value,
}

/// Write `store` in declaration order next to a manifest.
pub fn write_store(
    dir: &Path,
    kind: &str,
    seed: u64,
    config: Value,
    store: &ParamStore,
    history: Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        kind: kind.into(),
        seed,
        config,
        params: store
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect(),
        history,
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::file(&mpath, e))?;
    let mut bytes = Vec::with_capacity(store.num_scalars() * 8);
    for v in store.flat_values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let ppath = dir.join(PARAMS_FILE);
    fs::write(&ppath, bytes).map_err(|e| Error::file(&ppath, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(Error::Config(format!(
            "{}: unsupported format `{}`",
            path.display(),
            m.format
        )));
    }
    Ok(m)
}

/// Fill `store` from the parameter file, checking names and shapes
/// against the manifest.
pub fn read_params(dir: &Path, manifest: &Manifest, store: &mut ParamStore) -> Result<()> {
    if manifest.params.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for (meta, p) in manifest.params.iter().zip(store.iter()) {
        if meta.name != p.name || (meta.rows, meta.cols) != p.value.shape() {
            return Err(Error::Config(format!(
                "checkpoint tensor `{}` {}x{} does not match `{}` {:?}",
                meta.name,
                meta.rows,
                meta.cols,
                p.name,
                p.value.shape()
            )));
        }
    }
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::file(&path, e))?;
    if bytes.len() != store.num_scalars() * 8 {
        return Err(Error::Config(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            store.num_scalars() * 8,
            bytes.len()
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    store.load_flat(&flat)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelConfig {
    arch: ArchConfig,
    flags: AblationFlags,
}

impl NkmModel {
    pub fn save(&self, dir: &Path, history: Value) -> Result<()> {
        let config = serde_json::to_value(ModelConfig {
            arch: self.net.config.clone(),
            flags: self.net.flags,
        })?;
        write_store(dir, "nkm", self.seed, config, &self.store, history)
    }

    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let manifest = read_manifest(dir)?;
        if manifest.kind != "nkm" {
            return Err(Error::Config(format!(
                "checkpoint kind is `{}`, expected `nkm`",
                manifest.kind
            )));
        }
        let cfg: ModelConfig = serde_json::from_value(manifest.config.clone())?;
        let mut model = NkmModel::new(&cfg.arch, cfg.flags, manifest.seed)?;
        read_params(dir, &manifest, &mut model.store)?;
        Ok((model, manifest))
    }
}
