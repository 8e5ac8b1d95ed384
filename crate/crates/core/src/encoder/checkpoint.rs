//! Encoder checkpoints: a safetensors parameter file plus a JSON sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{load_safetensors, BackboneArch, EncoderConfig, OnlineNetwork, ParamStore};
use crate::error::{Error, Result};

pub const WEIGHTS_FILE: &str = "checkpoint.safetensors";
pub const SIDECAR_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: BackboneArch,
    pub feature_dim: usize,
    pub projector_out_dim: usize,
    pub input_size: usize,
    pub seed: u64,
    pub steps: usize,
    pub config_hash: String,
    pub encoder: EncoderConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn config_hash(config: &EncoderConfig) -> String {
    let json = serde_json::to_vec(config).expect("encoder config serializes");
    sha256_hex(&json)
}

/// Writes `checkpoint.safetensors` and `checkpoint.json` into `dir`.
pub fn save(dir: &Path, net: &OnlineNetwork, seed: u64, steps: usize) -> Result<CheckpointMeta> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = super::Encoder::config(net).clone();
    let meta = CheckpointMeta {
        arch: cfg.backbone_arch,
        feature_dim: cfg.feature_dim,
        projector_out_dim: cfg.projector_out_dim,
        input_size: cfg.input_size,
        seed,
        steps,
        config_hash: config_hash(&cfg),
        encoder: cfg,
    };
    super::Encoder::params(net).save_safetensors(&dir.join(WEIGHTS_FILE))?;
    let path = dir.join(SIDECAR_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

/// Resolves a checkpoint given either its directory, sidecar or weights path.
fn resolve(path: &Path) -> (PathBuf, PathBuf) {
    let dir = if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    (dir.join(SIDECAR_FILE), dir.join(WEIGHTS_FILE))
}

pub fn load(path: &Path) -> Result<(OnlineNetwork, CheckpointMeta)> {
    let (sidecar, weights) = resolve(path);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::CheckpointLoad {
        path: sidecar.clone(),
        reason: e.to_string(),
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.config_hash != config_hash(&meta.encoder) {
        return Err(Error::CheckpointLoad {
            path: sidecar,
            reason: "config hash does not match the recorded encoder config".into(),
        });
    }
    let tensors = load_safetensors(&weights)?;
    let mut store = ParamStore::new();
    let mut offending = Vec::new();
    for spec in meta.encoder.online_specs() {
        match tensors.get(&spec.name) {
            Some(t) if t.dims() == spec.shape.as_slice() => {
                store.insert(spec.name.clone(), t, spec.kind)?
            }
            Some(t) => offending.push(format!(
                "{} (expected {:?}, found {:?})",
                spec.name,
                spec.shape,
                t.dims()
            )),
            None => offending.push(format!("{} (missing)", spec.name)),
        }
    }
    if !offending.is_empty() {
        return Err(Error::CheckpointIncompatible { offending });
    }
    Ok((OnlineNetwork::from_parts(meta.encoder.clone(), store), meta))
}
