//! Training loops and the end-to-end pruning procedure.
//!
//! [`train`] minimizes token cross-entropy with Adam, tracks the best
//! checkpoint by validation score, and injects a [`MaskSet`] into every
//! attention call when one is given; masks apply at retraining and at
//! evaluation alike. [`run_ap`] chains the four steps: train a baseline,
//! collect average attention over the train split with the best
//! checkpoint, build masks at a prune percentage, and retrain under them.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, Dataset, Split, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{
    init_params, lm_forward_t, seq2seq_forward_t, Arch, Checkpoint, ModelParams,
    TransformerConfig,
};
use crate::attention::AttentionKind;
use crate::pipeline::{
    mask_strategy_by_name, AttentionStats, LayerThreshold, MaskBuildContext, MaskOrigin, MaskSet,
    PruneSpec, SparsityReport, StatsCollector,
};
use crate::tensor::Tape;

mod adam;
mod metrics;

pub use adam::{adam_step, lr_scale, OptimState};
pub use metrics::{bleu, eval_metrics, perplexity, token_accuracy, bleu_of, EvalMetrics};

pub(crate) use metrics::eval_metrics_params;
#[cfg(test)]
pub(crate) use metrics::{ce_counts, TeacherForcedTotals};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub warmup_steps: u64,
    /// Run seed: weight initialization and batch shuffling both derive
    /// from it, so fresh retraining reproduces the original init exactly.
    pub seed: u64,
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
            grad_clip: 1.0,
            batch_size: 32,
            max_steps: 600,
            warmup_steps: 40,
            seed: 1,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.lr <= 0.0 || self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "lr, batch_size, max_steps and eval_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub split: String,
    pub loss: f64,
    /// Perplexity for train/LM rows, token accuracy for pair validation.
    pub ppl_or_acc: f64,
    pub bleu: Option<f64>,
    pub lr: f64,
    /// Wall-clock time since training started. Excluded from every
    /// byte-stability guarantee.
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub best_step: u64,
    pub best_checkpoint_hash: String,
    pub wall_ms: u128,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "step,split,loss,ppl_or_acc,bleu,lr,wall_ms")?;
        for r in &self.rows {
            let bleu = r.bleu.map(|b| b.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.split, r.loss, r.ppl_or_acc, bleu, r.lr, r.wall_ms
            )?;
        }
        Ok(())
    }
}

fn check_dataset_arch(ds: &Dataset, cfg: &TransformerConfig) -> Result<()> {
    match (ds.is_pairs(), cfg.arch) {
        (true, Arch::EncDec) | (false, Arch::LmOnly) => Ok(()),
        (true, Arch::LmOnly) => Err(Error::Config(
            "pair dataset requires an encoder-decoder model".into(),
        )),
        (false, Arch::EncDec) => Err(Error::Config(
            "LM stream requires a decoder-only model".into(),
        )),
    }
}

/// One gradient step over a batch: token-weighted cross-entropy across
/// the batch's examples, backward, clip, Adam. Returns the batch loss.
fn train_batch(
    params: &mut ModelParams,
    opt: &mut OptimState,
    batch: &Batch,
    masks: Option<&MaskSet>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let model_cfg = params.config.clone();
    let tape = Tape::new();
    let bound = params.bind(&tape, true)?;

    let total_tokens: usize = batch
        .items
        .iter()
        .map(|item| item.real_tgt_len())
        .sum();
    if total_tokens == 0 {
        return Err(Error::Data("batch carries no target tokens".into()));
    }
    let mut loss_acc = None;
    for item in &batch.items {
        let real_tgt = item.real_tgt_len();
        let tgt_in = &item.tgt_in[..real_tgt];
        let gold = &item.gold[..real_tgt];
        let logits = match model_cfg.arch {
            Arch::LmOnly => lm_forward_t(&tape, &bound, &model_cfg, tgt_in, masks, None, None)?,
            Arch::EncDec => {
                let real_src = item.real_src_len();
                seq2seq_forward_t(
                    &tape,
                    &bound,
                    &model_cfg,
                    &item.src[..real_src],
                    tgt_in,
                    masks,
                    None,
                    None,
                    None,
                )?
            }
        };
        let ce = tape.cross_entropy(&logits, gold, Some(PAD_ID))?;
        let weighted = tape.scale(&ce, real_tgt as f64 / total_tokens as f64);
        loss_acc = Some(match loss_acc {
            None => weighted,
            Some(acc) => tape.add(&as_rank1(&acc), &as_rank1(&weighted))?,
        });
    }
    let loss = loss_acc.expect("non-empty batch");
    let loss_value = loss.item();
    if !loss_value.is_finite() {
        return Err(Error::Diverged(format!(
            "loss {loss_value} at optimizer step {}",
            opt.step + 1
        )));
    }
    let grads = tape.backward(&loss)?;
    let grad_vecs: Vec<Vec<f64>> = bound
        .tensors
        .iter()
        .map(|t| grads.get_or_zeros(t))
        .collect();
    // release every borrow of the weight buffers before mutating them
    drop(grads);
    drop(bound);
    drop(tape);
    adam_step(params, &grad_vecs, opt, cfg)?;
    Ok(loss_value)
}

/// Scalars are rank-0; view them as [1] so they can be added pairwise.
fn as_rank1(t: &crate::tensor::Tensor) -> crate::tensor::Tensor {
    t.reshaped(vec![1])
}

/// Trains until `max_steps`, evaluating on the validation split every
/// `eval_every` steps and keeping the best checkpoint: lowest validation
/// loss for LM tasks, highest validation BLEU for pair tasks. The mask
/// set, when given, is applied inside every attention call.
pub fn train(
    ckpt: &Checkpoint,
    ds: &Dataset,
    cfg: &TrainConfig,
    masks: Option<&MaskSet>,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    check_dataset_arch(ds, &ckpt.config)?;
    if let Some(ms) = masks {
        ms.validate_against(&ckpt.config.mask_shape())?;
    }
    let started = Instant::now();
    let mut params = ModelParams::from_checkpoint(ckpt)?;
    let mut opt = OptimState::new(&params);
    let seg_len = ckpt.config.max_tgt_len;
    let mut rows: Vec<LogRow> = Vec::new();
    let mut best: Option<(f64, u64, Checkpoint)> = None;
    let is_pairs = ds.is_pairs();

    let mut step = 0u64;
    let mut epoch = 0u64;
    'outer: loop {
        let batches = make_batches(ds, Split::Train, cfg.batch_size, seg_len, Some((cfg.seed, epoch)))?;
        for batch in &batches {
            step += 1;
            let loss = train_batch(&mut params, &mut opt, batch, masks, cfg)?;
            let lr_now = cfg.lr * lr_scale(step, cfg.warmup_steps);
            rows.push(LogRow {
                step,
                split: "train".into(),
                loss,
                ppl_or_acc: loss.exp(),
                bleu: None,
                lr: lr_now,
                wall_ms: started.elapsed().as_millis(),
            });

            if step % cfg.eval_every == 0 || step == cfg.max_steps {
                let metrics = eval_metrics_params(&params, ds, Split::Valid, masks)?;
                let (score, ppl_or_acc) = if is_pairs {
                    // higher BLEU is better; negate so lower is better
                    (
                        -metrics.bleu.unwrap_or(0.0),
                        metrics.token_accuracy.unwrap_or(0.0),
                    )
                } else {
                    (metrics.loss, metrics.perplexity)
                };
                rows.push(LogRow {
                    step,
                    split: "valid".into(),
                    loss: metrics.loss,
                    ppl_or_acc,
                    bleu: metrics.bleu,
                    lr: lr_now,
                    wall_ms: started.elapsed().as_millis(),
                });
                let improved = best.as_ref().map(|(b, _, _)| score < *b).unwrap_or(true);
                if improved {
                    let mut snapshot = params.to_checkpoint();
                    snapshot.step = step;
                    best = Some((score, step, snapshot));
                }
            }
            if step == cfg.max_steps {
                break 'outer;
            }
        }
        epoch += 1;
    }

    let (_, best_step, best_ckpt) = best.expect("at least one evaluation ran");
    let log = TrainLog {
        rows,
        best_step,
        best_checkpoint_hash: best_ckpt.weights_hash(),
        wall_ms: started.elapsed().as_millis(),
    };
    Ok((best_ckpt, log))
}

/// Runs the trained model over a split and accumulates every attention
/// weight matrix into per-head statistics. Collection is unmasked: it
/// observes the baseline model's patterns.
pub fn collect_stats(ckpt: &Checkpoint, ds: &Dataset, split: Split) -> Result<AttentionStats> {
    check_dataset_arch(ds, &ckpt.config)?;
    let params = ModelParams::from_checkpoint(ckpt)?;
    let mut collector = StatsCollector::new(&ckpt.config.mask_shape());
    match ckpt.config.arch {
        Arch::LmOnly => {
            let batches = make_batches(ds, split, 1, ckpt.config.max_tgt_len, None)?;
            for batch in &batches {
                for item in &batch.items {
                    collector.begin_example(Vec::new(), vec![true; item.tgt_in.len()]);
                    crate::model::lm_logits(&params, &item.tgt_in, None, Some(&mut collector))?;
                }
            }
        }
        Arch::EncDec => {
            for ex in ds.pairs(split)? {
                let tgt_in = &ex.tgt[..ex.tgt.len() - 1];
                collector.begin_example(vec![true; ex.src.len()], vec![true; tgt_in.len()]);
                crate::model::seq2seq_logits(&params, &ex.src, tgt_in, None, Some(&mut collector))?;
            }
        }
    }
    Ok(collector.stats)
}

/// Whether the pruned model restarts from the original initialization
/// (lottery-ticket style) or continues from the trained weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    Fresh,
    Finetune,
}

impl std::str::FromStr for RetrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(RetrainMode::Fresh),
            "finetune" => Ok(RetrainMode::Finetune),
            other => Err(Error::Config(format!(
                "unknown retrain mode {other:?}; expected fresh or finetune"
            ))),
        }
    }
}

/// Which mask source feeds the retraining step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSourceSpec {
    Ap,
    Random,
    Ood { path: PathBuf },
}

impl MaskSourceSpec {
    fn strategy_name(&self) -> &'static str {
        match self {
            MaskSourceSpec::Ap => "ap",
            MaskSourceSpec::Random => "random",
            MaskSourceSpec::Ood { .. } => "ood",
        }
    }
}

/// Everything one pruning run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApRunReport {
    pub task: String,
    pub seed: u64,
    pub p: f64,
    pub kinds: Vec<AttentionKind>,
    pub retrain_mode: RetrainMode,
    pub mask_origin: MaskOrigin,
    pub baseline: EvalMetrics,
    pub pruned: EvalMetrics,
    pub sparsity: SparsityReport,
    pub thresholds: Vec<LayerThreshold>,
    /// Retained-MAC fraction at the median evaluation length, using the
    /// achieved overall sparsity as the prune fraction.
    pub mac_fraction: f64,
    pub median_eval_len: usize,
    pub baseline_checkpoint_hash: String,
    /// Hash of the checkpoint statistics were collected from; equals the
    /// baseline hash because collection uses the best checkpoint.
    pub stats_checkpoint_hash: String,
    pub stats_examples: u64,
    pub band_note: Option<String>,
    /// Wall times, excluded from byte-stability guarantees.
    pub timing: RunTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub baseline_ms: u128,
    pub collect_ms: u128,
    pub retrain_ms: u128,
}

fn median_eval_len(ds: &Dataset, cfg: &TransformerConfig) -> Result<usize> {
    if ds.is_pairs() {
        let mut lens: Vec<usize> = ds
            .pairs(Split::Test)?
            .iter()
            .map(|ex| ex.tgt.len() - 1)
            .collect();
        if lens.is_empty() {
            return Err(Error::Data("empty test split".into()));
        }
        lens.sort_unstable();
        Ok(lens[lens.len() / 2])
    } else {
        Ok(cfg.max_tgt_len)
    }
}

/// The four-step procedure end to end.
///
/// Step 1 trains the baseline and measures test quality; step 2 averages
/// attention over the train split using the best checkpoint; step 3
/// builds the mask set (percentile, random baseline, or a reused file);
/// step 4 retrains under the mask (fresh from the original seed by
/// default) and measures masked test quality.
pub fn run_ap(
    model_cfg: &TransformerConfig,
    ds: &Dataset,
    prune: &PruneSpec,
    train_cfg: &TrainConfig,
    retrain_mode: RetrainMode,
    source: &MaskSourceSpec,
) -> Result<ApRunReport> {
    // step 1: baseline
    let t0 = Instant::now();
    let init = init_params(model_cfg, train_cfg.seed)?;
    let (baseline_ckpt, _baseline_log) = train(&init, ds, train_cfg, None)?;
    let baseline = eval_metrics(&baseline_ckpt, ds, Split::Test, None)?;
    let baseline_ms = t0.elapsed().as_millis();

    // step 2: averaged attention from the best checkpoint
    let t1 = Instant::now();
    let stats = collect_stats(&baseline_ckpt, ds, Split::Train)?;
    let avg = stats.average()?;
    let collect_ms = t1.elapsed().as_millis();

    // step 3: masks
    let strategy = mask_strategy_by_name(source.strategy_name())
        .expect("registered mask strategy");
    let ood_path = match source {
        MaskSourceSpec::Ood { path } => Some(path.as_path()),
        _ => None,
    };
    let shape = model_cfg.mask_shape();
    let mask = strategy.build(&MaskBuildContext {
        avg: &avg,
        spec: prune,
        source_dataset: &ds.name,
        seed: train_cfg.seed,
        ood_path,
        shape: &shape,
    })?;
    let sparsity = crate::pipeline::mask_sparsity(&mask);

    // step 4: retrain under the mask and evaluate masked
    let t2 = Instant::now();
    let retrain_init = match retrain_mode {
        RetrainMode::Fresh => init_params(model_cfg, train_cfg.seed)?,
        RetrainMode::Finetune => baseline_ckpt.clone(),
    };
    let (pruned_ckpt, _pruned_log) = train(&retrain_init, ds, train_cfg, Some(&mask))?;
    let pruned = eval_metrics(&pruned_ckpt, ds, Split::Test, Some(&mask))?;
    let retrain_ms = t2.elapsed().as_millis();

    let median_len = median_eval_len(ds, model_cfg)?;
    let mac_fraction =
        crate::cost::mac_fraction(model_cfg.attention.d_model, median_len, sparsity.overall)?;

    Ok(ApRunReport {
        task: ds.name.clone(),
        seed: train_cfg.seed,
        p: prune.p,
        kinds: prune.kinds.clone(),
        retrain_mode,
        mask_origin: mask.meta.origin,
        baseline,
        pruned,
        sparsity,
        thresholds: mask.meta.thresholds.clone(),
        mac_fraction,
        median_eval_len: median_len,
        baseline_checkpoint_hash: baseline_ckpt.weights_hash(),
        stats_checkpoint_hash: baseline_ckpt.weights_hash(),
        stats_examples: stats.examples_seen(),
        band_note: mask.meta.band_note.clone(),
        timing: RunTiming {
            baseline_ms,
            collect_ms,
            retrain_ms,
        },
    })
}

#[cfg(test)]
mod tests;
