//! On-disk formats for masks and statistics.
//!
//! Mask file layout: schema version, prune metadata, per-layer thresholds,
//! then one record per head holding the pruned pairs, the row-keep pairs
//! (both sorted lexicographically for byte-stable output) and the per-row
//! repair preference lists the slicer needs after a reload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};

use super::{
    AttentionStats, HeadKey, HeadMask, HeadStat, LayerThreshold, MaskMeta, MaskOrigin, MaskSet,
};

pub const MASK_SCHEMA_VERSION: u32 = 1;
pub const STATS_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MaskFile {
    schema_version: u32,
    p: f64,
    kinds: Vec<AttentionKind>,
    source_dataset: String,
    seed: Option<u64>,
    origin: MaskOrigin,
    thresholds: Vec<LayerThreshold>,
    #[serde(default)]
    band_note: Option<String>,
    heads: Vec<MaskHeadRecord>,
}

#[derive(Serialize, Deserialize)]
struct MaskHeadRecord {
    kind: AttentionKind,
    layer: usize,
    head: usize,
    n_max: usize,
    m_max: usize,
    pruned_pairs: Vec<(usize, usize)>,
    rowkeep_pairs: Vec<(usize, usize)>,
    row_pref: Vec<Vec<u32>>,
}

pub fn save_masks(mask: &MaskSet, path: &Path) -> Result<()> {
    let mut heads = Vec::with_capacity(mask.heads.len());
    for (key, head) in &mask.heads {
        let mut pruned_pairs = Vec::new();
        for i in 0..head.n_max {
            for j in 0..head.m_max {
                if head.pruned[i * head.m_max + j] {
                    pruned_pairs.push((i, j));
                }
            }
        }
        let mut rowkeep_pairs = head.rowkeep.clone();
        rowkeep_pairs.sort_unstable();
        heads.push(MaskHeadRecord {
            kind: key.kind,
            layer: key.layer,
            head: key.head,
            n_max: head.n_max,
            m_max: head.m_max,
            pruned_pairs,
            rowkeep_pairs,
            row_pref: head.row_pref.clone(),
        });
    }
    let file = MaskFile {
        schema_version: MASK_SCHEMA_VERSION,
        p: mask.meta.p,
        kinds: mask.meta.kinds.clone(),
        source_dataset: mask.meta.source_dataset.clone(),
        seed: mask.meta.seed,
        origin: mask.meta.origin,
        thresholds: mask.meta.thresholds.clone(),
        band_note: mask.meta.band_note.clone(),
        heads,
    };
    fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn load_masks(path: &Path) -> Result<MaskSet> {
    let bytes = fs::read(path)?;
    let file: MaskFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
    if file.schema_version != MASK_SCHEMA_VERSION {
        return Err(Error::Incompatible(format!(
            "mask schema version {} (expected {MASK_SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    let mut heads = BTreeMap::new();
    for rec in file.heads {
        let key = HeadKey::new(rec.kind, rec.layer, rec.head);
        if rec.row_pref.len() != rec.n_max {
            return Err(Error::Corrupt(format!(
                "mask head {key}: row_pref has {} rows, expected {}",
                rec.row_pref.len(),
                rec.n_max
            )));
        }
        let mut pruned = vec![false; rec.n_max * rec.m_max];
        for &(i, j) in &rec.pruned_pairs {
            if i >= rec.n_max || j >= rec.m_max {
                return Err(Error::Corrupt(format!(
                    "mask head {key}: pruned pair ({i}, {j}) out of range"
                )));
            }
            pruned[i * rec.m_max + j] = true;
        }
        let mut visited_total = 0u64;
        let mut pruned_visited = 0u64;
        for (i, pref) in rec.row_pref.iter().enumerate() {
            for &j in pref {
                if (j as usize) >= rec.m_max {
                    return Err(Error::Corrupt(format!(
                        "mask head {key}: row_pref column {j} out of range"
                    )));
                }
                visited_total += 1;
                if pruned[i * rec.m_max + j as usize] {
                    pruned_visited += 1;
                }
            }
        }
        heads.insert(
            key,
            HeadMask {
                n_max: rec.n_max,
                m_max: rec.m_max,
                pruned,
                rowkeep: rec.rowkeep_pairs,
                row_pref: rec.row_pref,
                visited_total,
                pruned_visited,
            },
        );
    }
    Ok(MaskSet {
        meta: MaskMeta {
            p: file.p,
            kinds: file.kinds,
            source_dataset: file.source_dataset,
            seed: file.seed,
            origin: file.origin,
            thresholds: file.thresholds,
            band_note: file.band_note,
        },
        heads,
    })
}

#[derive(Serialize, Deserialize)]
struct StatsFile {
    schema_version: u32,
    examples_seen: u64,
    heads: Vec<StatsHeadRecord>,
}

#[derive(Serialize, Deserialize)]
struct StatsHeadRecord {
    kind: AttentionKind,
    layer: usize,
    head: usize,
    n_max: usize,
    m_max: usize,
    sum: Vec<f64>,
    count: Vec<u64>,
}

pub fn save_stats(stats: &AttentionStats, path: &Path) -> Result<()> {
    let heads = stats
        .heads
        .iter()
        .map(|(key, stat)| StatsHeadRecord {
            kind: key.kind,
            layer: key.layer,
            head: key.head,
            n_max: stat.n_max,
            m_max: stat.m_max,
            sum: stat.sum.clone(),
            count: stat.count.clone(),
        })
        .collect();
    let file = StatsFile {
        schema_version: STATS_SCHEMA_VERSION,
        examples_seen: stats.examples_seen,
        heads,
    };
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load_stats(path: &Path) -> Result<AttentionStats> {
    let bytes = fs::read(path)?;
    let file: StatsFile = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
    if file.schema_version != STATS_SCHEMA_VERSION {
        return Err(Error::Incompatible(format!(
            "stats schema version {} (expected {STATS_SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    let mut heads = BTreeMap::new();
    for rec in file.heads {
        let key = HeadKey::new(rec.kind, rec.layer, rec.head);
        if rec.sum.len() != rec.n_max * rec.m_max || rec.count.len() != rec.sum.len() {
            return Err(Error::Corrupt(format!(
                "stats head {key}: matrix sizes disagree with {}x{}",
                rec.n_max, rec.m_max
            )));
        }
        heads.insert(
            key,
            HeadStat {
                n_max: rec.n_max,
                m_max: rec.m_max,
                sum: rec.sum,
                count: rec.count,
            },
        );
    }
    Ok(AttentionStats {
        examples_seen: file.examples_seen,
        heads,
    })
}
