//! Experiment configuration: one JSON document with explicit sections.
//! No environment variables except the output-directory override.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use attnprune::attention::{ActivationKind, AttentionConfig, AttentionKind};
use attnprune::data::{task_by_name, task_names, Dataset, TaskParams};
use attnprune::model::{Arch, TransformerConfig};
use attnprune::train::{RetrainMode, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSection,
    pub model: ModelSection,
    #[serde(default = "default_activation")]
    pub activation: String,
    pub train: TrainSection,
    pub prune: PruneSection,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

fn default_activation() -> String {
    "softmax".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSection {
    pub kind: String,
    #[serde(flatten)]
    pub params: TaskParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Derived from the task when omitted.
    #[serde(default)]
    pub max_src_len: Option<usize>,
    #[serde(default)]
    pub max_tgt_len: Option<usize>,
    #[serde(default)]
    pub tie_embeddings: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    pub max_steps: u64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "d_eval_every")]
    pub eval_every: u64,
}

fn d_lr() -> f64 {
    2e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.98
}
fn d_eps() -> f64 {
    1e-9
}
fn d_clip() -> f64 {
    1.0
}
fn d_batch() -> usize {
    32
}
fn d_warmup() -> u64 {
    40
}
fn d_eval_every() -> u64 {
    100
}

/// Either one kind subset (list of names) or several subsets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KindSets {
    One(Vec<String>),
    Many(Vec<Vec<String>>),
}

impl Default for KindSets {
    fn default() -> Self {
        KindSets::One(vec!["self_encoder".into(), "self_decoder".into()])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneSection {
    pub p: Vec<f64>,
    #[serde(default)]
    pub kinds: KindSets,
    #[serde(default = "d_retrain")]
    pub retrain_mode: String,
    /// ap | random | ood
    #[serde(default = "d_source")]
    pub source: String,
    #[serde(default)]
    pub ood_path: Option<PathBuf>,
}

fn d_retrain() -> String {
    "fresh".into()
}
fn d_source() -> String {
    "ap".into()
}

/// Fully resolved experiment: dataset generated, model config validated.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub model: TransformerConfig,
    pub train: TrainConfig,
    pub retrain_mode: RetrainMode,
    pub kind_sets: Vec<Vec<AttentionKind>>,
    pub out_dir: PathBuf,
}

pub fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("config: cannot read {}", path.display()))?;
    let cfg: ExperimentConfig = serde_json::from_slice(&bytes)
        .with_context(|| format!("config: cannot parse {}", path.display()))?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Generates the dataset and resolves every section into validated
    /// runtime types. `out_override` and `seed_override` come from the
    /// CLI flags; `ATTNPRUNE_OUT` also overrides the output directory.
    pub fn resolve(
        mut self,
        out_override: Option<PathBuf>,
        seed_override: Option<u64>,
    ) -> anyhow::Result<Experiment> {
        if let Some(seed) = seed_override {
            self.seeds = vec![seed];
        }
        if self.seeds.is_empty() {
            bail!("config: seeds must list at least one seed");
        }
        if self
            .prune
            .p
            .iter()
            .any(|&p| !(0.0..=100.0).contains(&p))
        {
            bail!("config: prune.p values must lie in [0, 100]");
        }
        let out_dir = out_override
            .or_else(|| std::env::var_os("ATTNPRUNE_OUT").map(PathBuf::from))
            .unwrap_or_else(|| self.out_dir.clone());

        let task = task_by_name(&self.task.kind).ok_or_else(|| {
            anyhow!(
                "config: task.kind {:?} is not one of {:?}",
                self.task.kind,
                task_names()
            )
        })?;
        let dataset = task.generate(&self.task.params)?;

        let activation: ActivationKind = self
            .activation
            .parse()
            .map_err(|e| anyhow!("config: {e}"))?;
        let arch = if dataset.is_pairs() { Arch::EncDec } else { Arch::LmOnly };
        let (data_src, data_tgt) = dataset.max_lens();
        let (max_src_len, max_tgt_len) = match arch {
            Arch::EncDec => {
                let src = self.model.max_src_len.unwrap_or(data_src);
                let tgt = self.model.max_tgt_len.unwrap_or(data_tgt);
                if src < data_src || tgt < data_tgt {
                    bail!(
                        "config: model windows {src}x{tgt} are smaller than the task's \
                         longest sequences {data_src}x{data_tgt}"
                    );
                }
                (src, tgt)
            }
            Arch::LmOnly => {
                let seg = self.model.max_tgt_len.unwrap_or(32);
                (self.model.max_src_len.unwrap_or(2).max(2), seg)
            }
        };
        let attention = AttentionConfig::new(self.model.d_model, self.model.n_heads, activation)
            .map_err(|e| anyhow!("config: {e}"))?;
        let model = TransformerConfig {
            arch,
            n_layers: self.model.n_layers,
            attention,
            d_ff: self.model.d_ff,
            vocab_size: dataset.vocab.size(),
            max_src_len,
            max_tgt_len,
            tie_embeddings: self.model.tie_embeddings,
        };
        model.validate().map_err(|e| anyhow!("config: {e}"))?;

        let retrain_mode: RetrainMode = self
            .prune
            .retrain_mode
            .parse()
            .map_err(|e| anyhow!("config: {e}"))?;
        if !["ap", "random", "ood"].contains(&self.prune.source.as_str()) {
            bail!(
                "config: prune.source {:?} must be ap, random or ood",
                self.prune.source
            );
        }
        if self.prune.source == "ood" && self.prune.ood_path.is_none() {
            bail!("config: prune.source = ood requires prune.ood_path");
        }

        let kind_sets = resolve_kind_sets(&self.prune.kinds, arch)?;
        let train = TrainConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
            weight_decay: self.train.weight_decay,
            grad_clip: self.train.grad_clip,
            batch_size: self.train.batch_size,
            max_steps: self.train.max_steps,
            warmup_steps: self.train.warmup_steps,
            seed: self.seeds[0],
            eval_every: self.train.eval_every,
        };
        train.validate().map_err(|e| anyhow!("config: {e}"))?;

        Ok(Experiment {
            dataset,
            model,
            train,
            retrain_mode,
            kind_sets,
            out_dir,
            config: self,
        })
    }
}

pub fn parse_kinds(names: &[String], arch: Arch) -> anyhow::Result<Vec<AttentionKind>> {
    let mut kinds = Vec::new();
    for name in names {
        let kind = AttentionKind::parse(name).map_err(|e| anyhow!("config: {e}"))?;
        if arch == Arch::LmOnly && kind != AttentionKind::SelfDecoder {
            bail!("config: kind {name} does not exist in a decoder-only model");
        }
        kinds.push(kind);
    }
    kinds.sort();
    kinds.dedup();
    if kinds.is_empty() {
        bail!("config: a kind subset cannot be empty");
    }
    Ok(kinds)
}

fn resolve_kind_sets(sets: &KindSets, arch: Arch) -> anyhow::Result<Vec<Vec<AttentionKind>>> {
    let lists: Vec<Vec<String>> = match sets {
        KindSets::One(names) => vec![names.clone()],
        KindSets::Many(lists) => lists.clone(),
    };
    if lists.is_empty() {
        bail!("config: prune.kinds must name at least one subset");
    }
    lists.iter().map(|l| parse_kinds(l, arch)).collect()
}

impl Experiment {
    pub fn train_config_for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn kinds_label(kinds: &[AttentionKind]) -> String {
        kinds
            .iter()
            .map(|k| k.as_str())
            .collect::<Vec<_>>()
            .join("+")
    }
}
