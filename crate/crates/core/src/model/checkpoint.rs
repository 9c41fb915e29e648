//! Checkpoint files: a JSON metadata document plus a raw little-endian
//! f64 payload, split at `<base>.json` / `<base>.bin`. Each weight records
//! its offset and a sha256 over its payload bytes, verified on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{Checkpoint, TransformerConfig};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    schema_version: u32,
    config: TransformerConfig,
    seed: u64,
    step: u64,
    weights: Vec<WeightMeta>,
}

#[derive(Serialize, Deserialize)]
struct WeightMeta {
    name: String,
    len: usize,
    offset: usize,
    sha256: String,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    let base = if base.extension().map(|e| e == "json").unwrap_or(false) {
        base.with_extension("")
    } else {
        base.to_path_buf()
    };
    (base.with_extension("json"), base.with_extension("bin"))
}

fn digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes `<base>.json` and `<base>.bin`. Output is byte-stable: the same
/// checkpoint saves to identical files every time.
pub fn save_checkpoint(ckpt: &Checkpoint, base: &Path) -> Result<()> {
    let (meta_path, bin_path) = paths(base);
    let mut payload: Vec<u8> = Vec::new();
    let mut weights = Vec::with_capacity(ckpt.weights.len());
    for (name, data) in &ckpt.weights {
        let offset = payload.len();
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        weights.push(WeightMeta {
            name: name.clone(),
            len: data.len(),
            offset,
            sha256: digest(&payload[offset..]),
        });
    }
    let meta = CheckpointMeta {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: ckpt.config.clone(),
        seed: ckpt.seed,
        step: ckpt.step,
        weights,
    };
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)?;
    fs::write(&bin_path, payload)?;
    Ok(())
}

/// Loads and verifies a checkpoint pair. Truncation, checksum mismatches
/// and shape disagreements with the config all fail without producing a
/// partial checkpoint.
pub fn load_checkpoint(base: &Path) -> Result<Checkpoint> {
    let (meta_path, bin_path) = paths(base);
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&meta_path)?)
        .map_err(|e| Error::Corrupt(format!("{}: {e}", meta_path.display())))?;
    if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint schema version {} (expected {CHECKPOINT_SCHEMA_VERSION})",
            meta.schema_version
        )));
    }
    meta.config.validate()?;
    let payload = fs::read(&bin_path)?;
    let expected_len: usize = meta.weights.iter().map(|w| w.len * 8).sum();
    if payload.len() != expected_len {
        return Err(Error::Corrupt(format!(
            "payload {} holds {} bytes, metadata implies {expected_len}",
            bin_path.display(),
            payload.len()
        )));
    }
    let mut weights = BTreeMap::new();
    for w in &meta.weights {
        let end = w.offset + w.len * 8;
        if end > payload.len() {
            return Err(Error::Corrupt(format!(
                "weight {} extends past the payload",
                w.name
            )));
        }
        let bytes = &payload[w.offset..end];
        if digest(bytes) != w.sha256 {
            return Err(Error::Corrupt(format!(
                "checksum mismatch for weight {}",
                w.name
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        weights.insert(w.name.clone(), data);
    }
    let ckpt = Checkpoint {
        config: meta.config,
        seed: meta.seed,
        step: meta.step,
        weights,
    };
    // shape agreement with the config is part of the load contract
    super::ModelParams::from_checkpoint(&ckpt)?;
    Ok(ckpt)
}
