//! Attention statistics and prune-mask construction.
//!
//! This is the core procedure: accumulate per-head average attention
//! matrices over a dataset, pool each layer's entries into a percentile
//! threshold, prune everything whose average falls strictly below it, and
//! repair any row the pruning would have emptied. Random and
//! out-of-distribution mask sources live behind the same interface for
//! baseline comparisons.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{AdditiveMask, AttentionKind};
use crate::error::{Error, Result};

mod file;
mod source;

pub use file::{load_masks, load_stats, save_masks, save_stats};
pub use source::{
    mask_strategy_by_name, mask_strategy_names, MaskBuildContext, MaskStrategy, MASK_STRATEGIES,
};

/// Identifies one attention head: (kind, layer, head), zero-based.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct HeadKey {
    pub kind: AttentionKind,
    pub layer: usize,
    pub head: usize,
}

impl HeadKey {
    pub fn new(kind: AttentionKind, layer: usize, head: usize) -> Self {
        HeadKey { kind, layer, head }
    }
}

impl std::fmt::Display for HeadKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/l{}/h{}", self.kind.as_str(), self.layer, self.head)
    }
}

/// Receives every post-activation attention weight matrix a forward pass
/// produces, tagged with its head and dimensions.
pub trait AttentionObserver {
    fn observe(&mut self, key: HeadKey, n_q: usize, n_k: usize, weights: &[f64]);
}

/// Static head layout of a model: layer/head counts plus the maximum
/// (query, key) dims per attention kind. Built by the model config and
/// consumed here so stats and masks always agree with the architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskShapeSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub dims: BTreeMap<AttentionKind, (usize, usize)>,
}

impl MaskShapeSpec {
    pub fn head_keys(&self) -> impl Iterator<Item = HeadKey> + '_ {
        self.dims.keys().flat_map(move |&kind| {
            (0..self.n_layers).flat_map(move |l| {
                (0..self.n_heads).map(move |h| HeadKey::new(kind, l, h))
            })
        })
    }
}

// ---------------------------------------------------------------------------
// Statistics accumulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HeadStat {
    pub n_max: usize,
    pub m_max: usize,
    /// Running sum of observed weights per (query, key) position.
    pub sum: Vec<f64>,
    /// How many observations landed on each position.
    pub count: Vec<u64>,
}

/// Per-head running sums and visitation counts of attention weights.
///
/// Supports shard-and-merge collection: accumulate disjoint example shards
/// independently, then [`AttentionStats::merge`]. Counts are exact; float
/// sums agree up to reassociation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    pub(crate) examples_seen: u64,
    pub(crate) heads: BTreeMap<HeadKey, HeadStat>,
}

impl AttentionStats {
    /// Zeroed stats covering every head of the given shape.
    pub fn for_shape(shape: &MaskShapeSpec) -> Self {
        let mut heads = BTreeMap::new();
        for key in shape.head_keys() {
            let (n_max, m_max) = shape.dims[&key.kind];
            heads.insert(
                key,
                HeadStat {
                    n_max,
                    m_max,
                    sum: vec![0.0; n_max * m_max],
                    count: vec![0; n_max * m_max],
                },
            );
        }
        AttentionStats {
            examples_seen: 0,
            heads,
        }
    }

    pub fn examples_seen(&self) -> u64 {
        self.examples_seen
    }

    pub fn head_keys(&self) -> impl Iterator<Item = HeadKey> + '_ {
        self.heads.keys().copied()
    }

    /// Marks the start of one example's worth of observations.
    pub fn begin_example(&mut self) {
        self.examples_seen += 1;
    }

    /// Adds one observed weight matrix into the running sums. Only
    /// positions valid on both the query and key side contribute; padded
    /// positions and everything beyond (n, m) stay untouched.
    pub fn accumulate(
        &mut self,
        key: HeadKey,
        weights: &[f64],
        n: usize,
        m: usize,
        query_valid: &[bool],
        key_valid: &[bool],
    ) -> Result<()> {
        let head = self
            .heads
            .get_mut(&key)
            .ok_or_else(|| Error::Shape(format!("accumulate: unknown head {key}")))?;
        if n > head.n_max || m > head.m_max {
            return Err(Error::Shape(format!(
                "accumulate: {n}x{m} overflows {}x{} for head {key}",
                head.n_max, head.m_max
            )));
        }
        if weights.len() != n * m || query_valid.len() != n || key_valid.len() != m {
            return Err(Error::Shape(format!(
                "accumulate: inconsistent lengths for head {key}"
            )));
        }
        for i in 0..n {
            if !query_valid[i] {
                continue;
            }
            for j in 0..m {
                if !key_valid[j] {
                    continue;
                }
                let idx = i * head.m_max + j;
                head.sum[idx] += weights[i * m + j];
                head.count[idx] += 1;
            }
        }
        Ok(())
    }

    /// Elementwise union of two shards. Shapes and head sets must agree.
    pub fn merge(&self, other: &AttentionStats) -> Result<AttentionStats> {
        if self.heads.len() != other.heads.len()
            || !self.heads.keys().eq(other.heads.keys())
        {
            return Err(Error::Shape("merge: head sets differ".into()));
        }
        let mut out = self.clone();
        out.examples_seen += other.examples_seen;
        for (key, head) in &mut out.heads {
            let rhs = &other.heads[key];
            if head.n_max != rhs.n_max || head.m_max != rhs.m_max {
                return Err(Error::Shape(format!("merge: shapes differ for head {key}")));
            }
            for (s, r) in head.sum.iter_mut().zip(&rhs.sum) {
                *s += r;
            }
            for (c, r) in head.count.iter_mut().zip(&rhs.count) {
                *c += r;
            }
        }
        Ok(out)
    }

    /// Per-head average attention: sum / count where visited. Unvisited
    /// entries are flagged, not folded in as zeros.
    pub fn average(&self) -> Result<AvgAttention> {
        if self.examples_seen == 0 {
            return Err(Error::Data("average of empty stats".into()));
        }
        let mut heads = BTreeMap::new();
        for (key, stat) in &self.heads {
            let mut value = vec![0.0; stat.sum.len()];
            let mut visited = vec![false; stat.sum.len()];
            for i in 0..stat.sum.len() {
                if stat.count[i] > 0 {
                    value[i] = stat.sum[i] / stat.count[i] as f64;
                    visited[i] = true;
                }
            }
            heads.insert(
                *key,
                AvgHead {
                    n_max: stat.n_max,
                    m_max: stat.m_max,
                    value,
                    visited,
                },
            );
        }
        Ok(AvgAttention {
            examples_seen: self.examples_seen,
            heads,
        })
    }
}

/// Collects attention weights from model forwards into [`AttentionStats`],
/// restricted to the currently valid (non-pad) positions of each side.
pub struct StatsCollector {
    pub stats: AttentionStats,
    src_valid: Vec<bool>,
    tgt_valid: Vec<bool>,
    pub observe_calls: u64,
}

impl StatsCollector {
    pub fn new(shape: &MaskShapeSpec) -> Self {
        StatsCollector {
            stats: AttentionStats::for_shape(shape),
            src_valid: Vec::new(),
            tgt_valid: Vec::new(),
            observe_calls: 0,
        }
    }

    /// Registers the validity vectors for the next example's forward pass.
    pub fn begin_example(&mut self, src_valid: Vec<bool>, tgt_valid: Vec<bool>) {
        self.stats.begin_example();
        self.src_valid = src_valid;
        self.tgt_valid = tgt_valid;
    }

    fn valid_for(&self, kind: AttentionKind) -> (&[bool], &[bool]) {
        match kind {
            AttentionKind::SelfEncoder => (&self.src_valid, &self.src_valid),
            AttentionKind::SelfDecoder => (&self.tgt_valid, &self.tgt_valid),
            AttentionKind::Cross => (&self.tgt_valid, &self.src_valid),
        }
    }
}

impl AttentionObserver for StatsCollector {
    fn observe(&mut self, key: HeadKey, n_q: usize, n_k: usize, weights: &[f64]) {
        self.observe_calls += 1;
        let (qv, kv) = self.valid_for(key.kind);
        let qv = if qv.len() == n_q {
            qv.to_vec()
        } else {
            vec![true; n_q]
        };
        let kv = if kv.len() == n_k {
            kv.to_vec()
        } else {
            vec![true; n_k]
        };
        self.stats
            .accumulate(key, weights, n_q, n_k, &qv, &kv)
            .expect("observer shapes agree with stats shape");
    }
}

// ---------------------------------------------------------------------------
// Averages and thresholds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AvgHead {
    pub n_max: usize,
    pub m_max: usize,
    pub value: Vec<f64>,
    pub visited: Vec<bool>,
}

/// Per-head average attention matrices with visitation flags.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgAttention {
    pub examples_seen: u64,
    pub heads: BTreeMap<HeadKey, AvgHead>,
}

impl AvgAttention {
    pub fn head(&self, key: &HeadKey) -> Option<&AvgHead> {
        self.heads.get(key)
    }

    pub fn kinds(&self) -> Vec<AttentionKind> {
        let mut kinds: Vec<AttentionKind> = self.heads.keys().map(|k| k.kind).collect();
        kinds.dedup();
        kinds
    }

    fn layers_of(&self, kind: AttentionKind) -> Vec<usize> {
        let mut layers: Vec<usize> = self
            .heads
            .keys()
            .filter(|k| k.kind == kind)
            .map(|k| k.layer)
            .collect();
        layers.dedup();
        layers
    }
}

/// Nearest-rank percentile threshold for one (kind, layer): pool every
/// visited average entry across that layer's heads, sort ascending keeping
/// duplicates, and take the element at index `min(K-1, floor(p/100 * K))`.
pub fn layer_threshold(
    avg: &AvgAttention,
    kind: AttentionKind,
    layer: usize,
    p: f64,
) -> Result<f64> {
    let mut pool: Vec<f64> = Vec::new();
    for (key, head) in &avg.heads {
        if key.kind != kind || key.layer != layer {
            continue;
        }
        for (v, &vis) in head.value.iter().zip(&head.visited) {
            if vis {
                pool.push(*v);
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::MaskConstruction(format!(
            "empty percentile pool for {}/l{layer}",
            kind.as_str()
        )));
    }
    pool.sort_by(|a, b| a.partial_cmp(b).expect("finite attention averages"));
    let k = pool.len();
    let idx = ((p / 100.0 * k as f64).floor() as usize).min(k - 1);
    Ok(pool[idx])
}

// ---------------------------------------------------------------------------
// Mask sets
// ---------------------------------------------------------------------------

/// What to prune: a global percentage and the attention kinds it covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    /// Percent of entries to prune, 0..=100.
    pub p: f64,
    pub kinds: Vec<AttentionKind>,
}

impl PruneSpec {
    pub fn new(p: f64, mut kinds: Vec<AttentionKind>) -> Result<Self> {
        if !(0.0..=100.0).contains(&p) {
            return Err(Error::Config(format!("prune percentage {p} outside 0..=100")));
        }
        kinds.sort();
        kinds.dedup();
        Ok(PruneSpec { p, kinds })
    }
}

/// How a mask set was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOrigin {
    /// Percentile thresholds over averaged attention.
    Ap,
    /// Seeded uniform choice over visited entries.
    Random,
    /// Reused from a mask built on a different dataset.
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerThreshold {
    pub kind: AttentionKind,
    pub layer: usize,
    pub tau: f64,
}

/// Mask provenance and the per-layer thresholds that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMeta {
    pub p: f64,
    pub kinds: Vec<AttentionKind>,
    pub source_dataset: String,
    pub seed: Option<u64>,
    pub origin: MaskOrigin,
    pub thresholds: Vec<LayerThreshold>,
    /// Set when achieved sparsity left the [p-5, p+1] band for a benign
    /// reason (threshold ties, row-keep repairs on tiny pools).
    pub band_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HeadMask {
    pub n_max: usize,
    pub m_max: usize,
    /// true = pruned, row-major `[n_max, m_max]`.
    pub pruned: Vec<bool>,
    /// Entries un-pruned by the row-keep rule at build time.
    pub rowkeep: Vec<(usize, usize)>,
    /// Per row: visited columns in repair-preference order (descending
    /// average attention for data-built masks). Used to reopen a window
    /// row that slicing or causality would otherwise leave fully masked.
    pub row_pref: Vec<Vec<u32>>,
    pub visited_total: u64,
    pub pruned_visited: u64,
}

/// Global boolean prune masks per head plus provenance metadata.
///
/// Immutable after construction. An empty mask set (no per-head entries)
/// is the p = 0 case: forwards treat it exactly like "no masking".
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub meta: MaskMeta,
    pub(crate) heads: BTreeMap<HeadKey, HeadMask>,
}

impl MaskSet {
    /// Mask set with no pruned entries at all.
    pub fn empty(p: f64, kinds: Vec<AttentionKind>, source_dataset: &str) -> Self {
        MaskSet {
            meta: MaskMeta {
                p,
                kinds,
                source_dataset: source_dataset.to_string(),
                seed: None,
                origin: MaskOrigin::Ap,
                thresholds: Vec::new(),
                band_note: None,
            },
            heads: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn covers(&self, key: &HeadKey) -> bool {
        self.heads.contains_key(key)
    }

    pub fn head_keys(&self) -> impl Iterator<Item = HeadKey> + '_ {
        self.heads.keys().copied()
    }

    /// (n_max, m_max) of one stored head matrix.
    pub fn head_dims(&self, key: &HeadKey) -> Option<(usize, usize)> {
        self.heads.get(key).map(|h| (h.n_max, h.m_max))
    }

    pub fn is_pruned(&self, key: &HeadKey, i: usize, j: usize) -> bool {
        self.heads
            .get(key)
            .map(|h| h.pruned[i * h.m_max + j])
            .unwrap_or(false)
    }

    /// Count of pruned entries restored per head by the row-keep rule.
    pub fn rowkeep_pairs(&self, key: &HeadKey) -> &[(usize, usize)] {
        self.heads
            .get(key)
            .map(|h| h.rowkeep.as_slice())
            .unwrap_or(&[])
    }

    pub fn pruned_count(&self, key: &HeadKey) -> usize {
        self.heads
            .get(key)
            .map(|h| h.pruned.iter().filter(|&&b| b).count())
            .unwrap_or(0)
    }

    /// Checks that every per-head matrix fits the model shape exactly.
    pub fn validate_against(&self, shape: &MaskShapeSpec) -> Result<()> {
        for (key, head) in &self.heads {
            let Some(&(n_max, m_max)) = shape.dims.get(&key.kind) else {
                return Err(Error::Incompatible(format!(
                    "mask covers {} but the model has no such attention kind",
                    key.kind.as_str()
                )));
            };
            if key.layer >= shape.n_layers || key.head >= shape.n_heads {
                return Err(Error::Incompatible(format!(
                    "mask head {key} outside model with {} layers x {} heads",
                    shape.n_layers, shape.n_heads
                )));
            }
            if (head.n_max, head.m_max) != (n_max, m_max) {
                return Err(Error::Incompatible(format!(
                    "mask head {key} is {}x{}, model expects {n_max}x{m_max}",
                    head.n_max, head.m_max
                )));
            }
        }
        Ok(())
    }
}

/// Builds the percentile prune masks from averaged attention.
///
/// An entry is pruned iff it was visited and its average lands strictly
/// below the layer threshold, or it was never visited at all. Rows whose
/// visited entries would all be pruned get their highest-average entry
/// back (the row-keep rule). `p = 0` yields a genuinely empty mask set.
pub fn build_masks(avg: &AvgAttention, spec: &PruneSpec, source_dataset: &str) -> Result<MaskSet> {
    for kind in &spec.kinds {
        if !avg.heads.keys().any(|k| k.kind == *kind) {
            return Err(Error::MaskConstruction(format!(
                "no collected statistics for kind {}",
                kind.as_str()
            )));
        }
    }
    let mut mask = MaskSet::empty(spec.p, spec.kinds.clone(), source_dataset);
    if spec.p == 0.0 {
        return Ok(mask);
    }

    let mut thresholds = Vec::new();
    let mut tau_of: BTreeMap<(AttentionKind, usize), f64> = BTreeMap::new();
    for &kind in &spec.kinds {
        for layer in avg.layers_of(kind) {
            let tau = layer_threshold(avg, kind, layer, spec.p)?;
            thresholds.push(LayerThreshold { kind, layer, tau });
            tau_of.insert((kind, layer), tau);
        }
    }

    let mut visited_total = 0u64;
    let mut candidate_total = 0u64;
    let mut rowkeep_total = 0u64;
    for (key, head) in &avg.heads {
        if !spec.kinds.contains(&key.kind) {
            continue;
        }
        let tau = tau_of[&(key.kind, key.layer)];
        let (n_max, m_max) = (head.n_max, head.m_max);
        let mut pruned = vec![false; n_max * m_max];
        for idx in 0..pruned.len() {
            pruned[idx] = if head.visited[idx] {
                head.value[idx] < tau
            } else {
                // never exercised by the training distribution
                true
            };
        }
        let mut rowkeep = Vec::new();
        let mut row_pref = Vec::with_capacity(n_max);
        for i in 0..n_max {
            let row = i * m_max;
            let mut cols: Vec<u32> = (0..m_max as u32)
                .filter(|&j| head.visited[row + j as usize])
                .collect();
            cols.sort_by(|&a, &b| {
                head.value[row + b as usize]
                    .partial_cmp(&head.value[row + a as usize])
                    .expect("finite averages")
                    .then(a.cmp(&b))
            });
            if !cols.is_empty()
                && cols.iter().all(|&j| pruned[row + j as usize])
            {
                let keep = cols[0] as usize;
                pruned[row + keep] = false;
                rowkeep.push((i, keep));
            }
            row_pref.push(cols);
        }

        let visited = head.visited.iter().filter(|&&v| v).count() as u64;
        let pruned_visited = head
            .visited
            .iter()
            .zip(&pruned)
            .filter(|(&v, &p)| v && p)
            .count() as u64;
        visited_total += visited;
        candidate_total += pruned_visited + rowkeep.len() as u64;
        rowkeep_total += rowkeep.len() as u64;
        mask.heads.insert(
            *key,
            HeadMask {
                n_max,
                m_max,
                pruned,
                rowkeep,
                row_pref,
                visited_total: visited,
                pruned_visited,
            },
        );
    }
    thresholds.sort_by(|a, b| (a.kind, a.layer).cmp(&(b.kind, b.layer)));
    mask.meta.thresholds = thresholds;

    check_band(&mut mask, spec.p, visited_total, candidate_total, rowkeep_total)?;
    Ok(mask)
}

/// Achieved sparsity is expected inside [p-5, p+1] percentage points.
/// Undershoot fully accounted for by threshold ties or row-keep repairs is
/// benign (recorded as a note); anything else is a construction bug.
fn check_band(
    mask: &mut MaskSet,
    p: f64,
    visited_total: u64,
    candidate_total: u64,
    rowkeep_total: u64,
) -> Result<()> {
    if visited_total == 0 {
        return Err(Error::MaskConstruction(
            "mask construction saw no visited entries".into(),
        ));
    }
    let achieved =
        100.0 * (candidate_total - rowkeep_total) as f64 / visited_total as f64;
    if achieved > p + 1.0 {
        return Err(Error::MaskConstruction(format!(
            "achieved sparsity {achieved:.2}% overshoots the [{:.1}, {:.1}] band",
            p - 5.0,
            p + 1.0
        )));
    }
    if achieved < p - 5.0 {
        // Strict-below pruning keeps candidate_total <= floor(p * K / 100);
        // any gap between that ceiling and the candidates is tie mass at
        // the threshold, and row-keep explains the rest.
        let target = (p / 100.0 * visited_total as f64).floor();
        let tie_shortfall = target - candidate_total as f64;
        let explained = tie_shortfall >= -1e-9;
        if !explained {
            return Err(Error::MaskConstruction(format!(
                "achieved sparsity {achieved:.2}% outside [{:.1}, {:.1}] and not \
                 explained by ties or row-keep (candidates {candidate_total}, \
                 row-keep {rowkeep_total}, visited {visited_total})",
                p - 5.0,
                p + 1.0
            )));
        }
        mask.meta.band_note = Some(format!(
            "achieved sparsity {achieved:.2}% below the [{:.1}, {:.1}] band: \
             {:.0} of {visited_total} visited entries tie at the threshold or \
             were restored by row-keep ({rowkeep_total} restorations)",
            p - 5.0,
            p + 1.0,
            tie_shortfall + rowkeep_total as f64,
        ));
    }
    Ok(())
}

/// Seeded uniform baseline: per head, exactly `round(p/100 * K_visited)`
/// visited entries pruned without replacement, then row-keep restores a
/// random pruned entry in any emptied row.
pub fn random_masks(
    avg: &AvgAttention,
    spec: &PruneSpec,
    seed: u64,
    source_dataset: &str,
) -> Result<MaskSet> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    for kind in &spec.kinds {
        if !avg.heads.keys().any(|k| k.kind == *kind) {
            return Err(Error::MaskConstruction(format!(
                "no collected statistics for kind {}",
                kind.as_str()
            )));
        }
    }
    let mut mask = MaskSet::empty(spec.p, spec.kinds.clone(), source_dataset);
    mask.meta.origin = MaskOrigin::Random;
    mask.meta.seed = Some(seed);
    if spec.p == 0.0 {
        return Ok(mask);
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for (key, head) in &avg.heads {
        if !spec.kinds.contains(&key.kind) {
            continue;
        }
        let (n_max, m_max) = (head.n_max, head.m_max);
        let visited_idx: Vec<usize> = (0..n_max * m_max).filter(|&i| head.visited[i]).collect();
        let k_visited = visited_idx.len();
        let target = (spec.p / 100.0 * k_visited as f64).round() as usize;

        let mut pruned = vec![false; n_max * m_max];
        for idx in 0..pruned.len() {
            if !head.visited[idx] {
                pruned[idx] = true;
            }
        }
        let mut choices = visited_idx.clone();
        choices.shuffle(&mut rng);
        for &idx in choices.iter().take(target) {
            pruned[idx] = true;
        }

        let mut rowkeep = Vec::new();
        let mut row_pref = Vec::with_capacity(n_max);
        for i in 0..n_max {
            let row = i * m_max;
            let mut cols: Vec<u32> = (0..m_max as u32)
                .filter(|&j| head.visited[row + j as usize])
                .collect();
            cols.shuffle(&mut rng);
            if !cols.is_empty() && cols.iter().all(|&j| pruned[row + j as usize]) {
                let keep = cols[0] as usize;
                pruned[row + keep] = false;
                rowkeep.push((i, keep));
            }
            row_pref.push(cols);
        }

        let pruned_visited = head
            .visited
            .iter()
            .zip(&pruned)
            .filter(|(&v, &p)| v && p)
            .count() as u64;
        mask.heads.insert(
            *key,
            HeadMask {
                n_max,
                m_max,
                pruned,
                rowkeep,
                row_pref,
                visited_total: k_visited as u64,
                pruned_visited,
            },
        );
    }
    Ok(mask)
}

/// Slices the stored global mask down to one sequence's `[n, m]` window as
/// an additive mask.
///
/// A window row can come out fully masked when its row-keep survivor lies
/// outside the window or beyond the causal boundary; in that case the
/// best-preference visited entry inside the visible range is cleared, or
/// the near-diagonal position when nothing visited is in range.
pub fn slice_additive(
    mask: &MaskSet,
    key: HeadKey,
    n: usize,
    m: usize,
    neg_fill: f64,
) -> Result<AdditiveMask> {
    let head = mask
        .heads
        .get(&key)
        .ok_or_else(|| Error::Shape(format!("slice_additive: no mask for head {key}")))?;
    if n > head.n_max || m > head.m_max {
        return Err(Error::Shape(format!(
            "slice_additive: {n}x{m} window exceeds stored {}x{}",
            head.n_max, head.m_max
        )));
    }
    let causal = key.kind.is_causal();
    let mut out = AdditiveMask::from_masked_flags(n, m, neg_fill, |i, j| {
        head.pruned[i * head.m_max + j]
    });
    for i in 0..n {
        let visible_max = if causal { i.min(m - 1) } else { m - 1 };
        let starved = (0..=visible_max).all(|j| out.is_masked(i, j));
        if !starved {
            continue;
        }
        let repair = head
            .row_pref
            .get(i)
            .and_then(|pref| {
                pref.iter()
                    .map(|&c| c as usize)
                    .find(|&c| c <= visible_max)
            })
            .unwrap_or_else(|| i.min(m - 1));
        out.set_masked(i, repair.min(visible_max), false);
    }
    Ok(out)
}

/// Fraction of visited entries pruned, per kind, per layer, and overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub overall: f64,
    pub per_kind: BTreeMap<AttentionKind, f64>,
    pub per_layer: Vec<(AttentionKind, usize, f64)>,
}

pub fn mask_sparsity(mask: &MaskSet) -> SparsityReport {
    let frac = |pruned: u64, visited: u64| -> f64 {
        if visited == 0 {
            0.0
        } else {
            pruned as f64 / visited as f64
        }
    };
    let mut by_kind: BTreeMap<AttentionKind, (u64, u64)> = BTreeMap::new();
    let mut by_layer: BTreeMap<(AttentionKind, usize), (u64, u64)> = BTreeMap::new();
    let mut total = (0u64, 0u64);
    for (key, head) in &mask.heads {
        let k = by_kind.entry(key.kind).or_default();
        k.0 += head.pruned_visited;
        k.1 += head.visited_total;
        let l = by_layer.entry((key.kind, key.layer)).or_default();
        l.0 += head.pruned_visited;
        l.1 += head.visited_total;
        total.0 += head.pruned_visited;
        total.1 += head.visited_total;
    }
    SparsityReport {
        overall: frac(total.0, total.1),
        per_kind: by_kind
            .into_iter()
            .map(|(k, (p, v))| (k, frac(p, v)))
            .collect(),
        per_layer: by_layer
            .into_iter()
            .map(|((k, l), (p, v))| (k, l, frac(p, v)))
            .collect(),
    }
}
