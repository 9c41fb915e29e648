//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::Serialize;

use attnprune::attention::AttentionKind;
use attnprune::cost::{attention_macs, mac_fraction, CostParams, InstrumentedAttention};
use attnprune::data::{export_lines, Split};
use attnprune::model::{init_params, load_checkpoint, save_checkpoint, Checkpoint};
use attnprune::pipeline::{
    load_masks, load_stats, mask_strategy_by_name, save_masks, save_stats, AvgAttention,
    HeadKey, LayerThreshold, MaskBuildContext, MaskOrigin, MaskSet, PruneSpec, SparsityReport,
};
use attnprune::train::{collect_stats, eval_metrics, train, EvalMetrics, RetrainMode};

use crate::config::Experiment;

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct MetricsDoc {
    seed: u64,
    split: &'static str,
    masked: bool,
    mask_file: Option<String>,
    retrain_mode: Option<RetrainMode>,
    best_step: u64,
    checkpoint_hash: String,
    metrics: EvalMetrics,
}

#[derive(Serialize)]
struct TimingDoc {
    seed: u64,
    wall_ms: u128,
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(exp: &Experiment, export_data: bool) -> anyhow::Result<()> {
    ensure_dir(&exp.out_dir)?;
    if export_data {
        for split in [Split::Train, Split::Valid, Split::Test] {
            let path = exp.out_dir.join(format!("data_{}.txt", split.tag()));
            export_lines(&exp.dataset, split, &path)?;
        }
    }
    for &seed in &exp.config.seeds {
        let tcfg = exp.train_config_for_seed(seed);
        let init = init_params(&exp.model, seed)?;
        let (best, log) = train(&init, &exp.dataset, &tcfg, None)?;
        let metrics = eval_metrics(&best, &exp.dataset, Split::Test, None)?;
        save_checkpoint(&best, &exp.out_dir.join(format!("baseline_seed{seed}")))?;
        log.write_csv(&exp.out_dir.join(format!("train_log_seed{seed}.csv")))?;
        write_json(
            &MetricsDoc {
                seed,
                split: "test",
                masked: false,
                mask_file: None,
                retrain_mode: None,
                best_step: log.best_step,
                checkpoint_hash: best.weights_hash(),
                metrics: metrics.clone(),
            },
            &exp.out_dir.join(format!("metrics_seed{seed}.json")),
        )?;
        write_json(
            &TimingDoc {
                seed,
                wall_ms: log.wall_ms,
            },
            &exp.out_dir.join(format!("timing_seed{seed}.json")),
        )?;
        println!(
            "seed {seed}: best step {} loss {:.4} {}",
            log.best_step,
            metrics.loss,
            summarize(&metrics)
        );
    }
    Ok(())
}

fn summarize(m: &EvalMetrics) -> String {
    match (m.token_accuracy, m.bleu) {
        (Some(acc), Some(bleu)) => format!("acc {acc:.4} bleu {bleu:.2}"),
        _ => format!("ppl {:.3}", m.perplexity),
    }
}

// ---------------------------------------------------------------------------
// collect
// ---------------------------------------------------------------------------

pub fn cmd_collect(exp: &Experiment, ckpt_base: &Path) -> anyhow::Result<()> {
    ensure_dir(&exp.out_dir)?;
    let ckpt = load_checkpoint(ckpt_base)?;
    if ckpt.config != exp.model {
        bail!(
            "checkpoint model config does not match the experiment config \
             (arch/dims/vocab must agree)"
        );
    }
    let stats = collect_stats(&ckpt, &exp.dataset, Split::Train)?;
    let path = exp.out_dir.join(format!("stats_seed{}.json", ckpt.seed));
    save_stats(&stats, &path)?;
    println!(
        "collected {} examples over {} heads -> {}",
        stats.examples_seen(),
        stats.head_keys().count(),
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// mask
// ---------------------------------------------------------------------------

pub struct MaskArgs<'a> {
    pub stats_path: &'a Path,
    pub p: f64,
    pub kinds: Option<Vec<String>>,
    pub random_seed: Option<u64>,
    pub ood: Option<PathBuf>,
    pub out_file: Option<PathBuf>,
}

pub fn cmd_mask(exp: &Experiment, args: &MaskArgs) -> anyhow::Result<()> {
    ensure_dir(&exp.out_dir)?;
    let stats = load_stats(args.stats_path)?;
    let avg = stats.average()?;
    let kinds = match &args.kinds {
        Some(names) => crate::config::parse_kinds(names, exp.model.arch)?,
        None => exp.kind_sets[0].clone(),
    };
    let spec = PruneSpec::new(args.p, kinds.clone())?;
    let shape = exp.model.mask_shape();
    let strategy_name = if args.ood.is_some() {
        "ood"
    } else if args.random_seed.is_some() {
        "random"
    } else {
        "ap"
    };
    let strategy = mask_strategy_by_name(strategy_name).expect("registered strategy");
    let mask = strategy.build(&MaskBuildContext {
        avg: &avg,
        spec: &spec,
        source_dataset: &exp.dataset.name,
        seed: args.random_seed.unwrap_or(exp.config.seeds[0]),
        ood_path: args.ood.as_deref(),
        shape: &shape,
    })?;
    if let Some(note) = &mask.meta.band_note {
        bail!("achieved sparsity left the tolerance band: {note}");
    }
    let label = Experiment::kinds_label(&kinds);
    let path = args.out_file.clone().unwrap_or_else(|| {
        exp.out_dir
            .join(format!("mask_p{}_{label}_{strategy_name}.json", args.p))
    });
    save_masks(&mask, &path)?;

    let sparsity = attnprune::pipeline::mask_sparsity(&mask);
    println!("mask -> {}", path.display());
    println!("achieved sparsity over visited entries:");
    println!("  overall: {:.4}", sparsity.overall);
    for (kind, frac) in &sparsity.per_kind {
        println!("  {}: {:.4}", kind.as_str(), frac);
    }
    for (kind, layer, frac) in &sparsity.per_layer {
        println!("  {}/l{layer}: {:.4}", kind.as_str(), frac);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// retrain
// ---------------------------------------------------------------------------

pub fn cmd_retrain(exp: &Experiment, mask_path: &Path) -> anyhow::Result<()> {
    ensure_dir(&exp.out_dir)?;
    let mask = load_masks(mask_path)?;
    mask.validate_against(&exp.model.mask_shape())?;
    let label = format!(
        "p{}_{}",
        mask.meta.p,
        Experiment::kinds_label(&mask.meta.kinds)
    );
    for &seed in &exp.config.seeds {
        let tcfg = exp.train_config_for_seed(seed);
        let start = match exp.retrain_mode {
            RetrainMode::Fresh => init_params(&exp.model, seed)?,
            RetrainMode::Finetune => {
                let base = exp.out_dir.join(format!("baseline_seed{seed}"));
                load_checkpoint(&base).map_err(|e| {
                    anyhow!(
                        "finetune retraining needs a baseline checkpoint at {}: {e}",
                        base.display()
                    )
                })?
            }
        };
        let (pruned, log) = train(&start, &exp.dataset, &tcfg, Some(&mask))?;
        let metrics = eval_metrics(&pruned, &exp.dataset, Split::Test, Some(&mask))?;
        let base = exp.out_dir.join(format!("pruned_seed{seed}_{label}"));
        save_checkpoint(&pruned, &base)?;
        log.write_csv(&exp.out_dir.join(format!("retrain_log_seed{seed}_{label}.csv")))?;
        write_json(
            &MetricsDoc {
                seed,
                split: "test",
                masked: true,
                mask_file: Some(mask_path.display().to_string()),
                retrain_mode: Some(exp.retrain_mode),
                best_step: log.best_step,
                checkpoint_hash: pruned.weights_hash(),
                metrics: metrics.clone(),
            },
            &exp.out_dir.join(format!("metrics_pruned_seed{seed}_{label}.json")),
        )?;
        println!("seed {seed}: pruned {}", summarize(&metrics));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub seed: u64,
    pub p: f64,
    pub kinds: String,
    pub metric_name: &'static str,
    pub baseline: Option<EvalMetrics>,
    pub pruned: Option<EvalMetrics>,
    pub sparsity: Option<SparsityReport>,
    pub thresholds: Vec<LayerThreshold>,
    pub mac_fraction: Option<f64>,
    pub median_eval_len: Option<usize>,
    pub mask_origin: Option<MaskOrigin>,
    pub baseline_checkpoint_hash: String,
    pub stats_examples: u64,
    pub band_note: Option<String>,
    pub failed: Option<String>,
}

impl SweepCell {
    fn primary(m: &EvalMetrics, name: &str) -> f64 {
        match name {
            "token_accuracy" => m.token_accuracy.unwrap_or(f64::NAN),
            _ => m.perplexity,
        }
    }
}

#[derive(Serialize)]
struct Aggregate {
    p: f64,
    kinds: String,
    metric_name: &'static str,
    median_metric_baseline: f64,
    median_metric_pruned: f64,
    median_sparsity: f64,
    median_mac_fraction: f64,
    seeds: usize,
}

#[derive(Serialize)]
struct SweepReport<'a> {
    config: &'a crate::config::ExperimentConfig,
    metric_name: &'static str,
    cells: &'a [SweepCell],
    aggregates: Vec<Aggregate>,
}

struct SeedOutcome {
    seed: u64,
    baseline: Checkpoint,
    baseline_metrics: EvalMetrics,
    avg: AvgAttention,
    stats_examples: u64,
    wall_ms: u128,
}

fn run_seed_baseline(exp: &Experiment, seed: u64) -> anyhow::Result<SeedOutcome> {
    let start = std::time::Instant::now();
    let tcfg = exp.train_config_for_seed(seed);
    let init = init_params(&exp.model, seed)?;
    let (baseline, _log) = train(&init, &exp.dataset, &tcfg, None)?;
    let baseline_metrics = eval_metrics(&baseline, &exp.dataset, Split::Test, None)?;
    let stats = collect_stats(&baseline, &exp.dataset, Split::Train)?;
    let stats_examples = stats.examples_seen();
    let avg = stats.average()?;
    Ok(SeedOutcome {
        seed,
        baseline,
        baseline_metrics,
        avg,
        stats_examples,
        wall_ms: start.elapsed().as_millis(),
    })
}

fn median(values: &mut Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn run_seed_cells(
    exp: &Experiment,
    outcome: &SeedOutcome,
    metric_name: &'static str,
    masks_dir: &Path,
) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    let shape = exp.model.mask_shape();
    for &p in &exp.config.prune.p {
        for kinds in &exp.kind_sets {
            let label = Experiment::kinds_label(kinds);
            let mut cell = SweepCell {
                seed: outcome.seed,
                p,
                kinds: label.clone(),
                metric_name,
                baseline: Some(outcome.baseline_metrics.clone()),
                pruned: None,
                sparsity: None,
                thresholds: Vec::new(),
                mac_fraction: None,
                median_eval_len: None,
                mask_origin: None,
                baseline_checkpoint_hash: outcome.baseline.weights_hash(),
                stats_examples: outcome.stats_examples,
                band_note: None,
                failed: None,
            };
            let result = (|| -> anyhow::Result<()> {
                let spec = PruneSpec::new(p, kinds.clone())?;
                let strategy = mask_strategy_by_name(&exp.config.prune.source)
                    .ok_or_else(|| anyhow!("unknown mask source"))?;
                let mask = strategy.build(&MaskBuildContext {
                    avg: &outcome.avg,
                    spec: &spec,
                    source_dataset: &exp.dataset.name,
                    seed: outcome.seed,
                    ood_path: exp.config.prune.ood_path.as_deref(),
                    shape: &shape,
                })?;
                save_masks(
                    &mask,
                    &masks_dir.join(format!("seed{}_p{p}_{label}.json", outcome.seed)),
                )?;
                let tcfg = exp.train_config_for_seed(outcome.seed);
                let start = match exp.retrain_mode {
                    RetrainMode::Fresh => init_params(&exp.model, outcome.seed)?,
                    RetrainMode::Finetune => outcome.baseline.clone(),
                };
                let (pruned_ckpt, _log) = train(&start, &exp.dataset, &tcfg, Some(&mask))?;
                let pruned = eval_metrics(&pruned_ckpt, &exp.dataset, Split::Test, Some(&mask))?;
                let sparsity = attnprune::pipeline::mask_sparsity(&mask);
                let median_len = median_eval_len(exp)?;
                cell.mac_fraction = Some(mac_fraction(
                    exp.model.attention.d_model,
                    median_len,
                    sparsity.overall,
                )?);
                cell.median_eval_len = Some(median_len);
                cell.pruned = Some(pruned);
                cell.sparsity = Some(sparsity);
                cell.thresholds = mask.meta.thresholds.clone();
                cell.mask_origin = Some(mask.meta.origin);
                cell.band_note = mask.meta.band_note.clone();
                Ok(())
            })();
            if let Err(e) = result {
                cell.failed = Some(e.to_string());
            }
            cells.push(cell);
        }
    }
    cells
}

fn median_eval_len(exp: &Experiment) -> anyhow::Result<usize> {
    if exp.dataset.is_pairs() {
        let mut lens: Vec<usize> = exp
            .dataset
            .pairs(Split::Test)?
            .iter()
            .map(|ex| ex.tgt.len() - 1)
            .collect();
        lens.sort_unstable();
        Ok(lens[lens.len() / 2])
    } else {
        Ok(exp.model.max_tgt_len)
    }
}

pub fn cmd_sweep(exp: &Experiment, jobs: usize) -> anyhow::Result<bool> {
    ensure_dir(&exp.out_dir)?;
    let masks_dir = exp.out_dir.join("masks");
    ensure_dir(&masks_dir)?;
    let metric_name: &'static str = if exp.dataset.is_pairs() {
        "token_accuracy"
    } else {
        "perplexity"
    };

    // phase 1: per-seed baselines and statistics, fanned out over jobs
    let seeds = exp.config.seeds.clone();
    let outcomes: Vec<anyhow::Result<SeedOutcome>> = if jobs <= 1 || seeds.len() <= 1 {
        seeds.iter().map(|&s| run_seed_baseline(exp, s)).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&s| scope.spawn(move || run_seed_baseline(exp, s)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("no panics")).collect()
        })
    };

    // phase 2: mask + retrain cells, sequential per seed to keep output
    // assembly deterministic
    let mut cells: Vec<SweepCell> = Vec::new();
    let mut timings: Vec<TimingDoc> = Vec::new();
    for (seed, outcome) in seeds.iter().zip(outcomes) {
        match outcome {
            Ok(out) => {
                timings.push(TimingDoc {
                    seed: *seed,
                    wall_ms: out.wall_ms,
                });
                save_checkpoint(
                    &out.baseline,
                    &exp.out_dir.join(format!("baseline_seed{seed}")),
                )?;
                cells.extend(run_seed_cells(exp, &out, metric_name, &masks_dir));
            }
            Err(e) => {
                for &p in &exp.config.prune.p {
                    for kinds in &exp.kind_sets {
                        cells.push(SweepCell {
                            seed: *seed,
                            p,
                            kinds: Experiment::kinds_label(kinds),
                            metric_name,
                            baseline: None,
                            pruned: None,
                            sparsity: None,
                            thresholds: Vec::new(),
                            mac_fraction: None,
                            median_eval_len: None,
                            mask_origin: None,
                            baseline_checkpoint_hash: String::new(),
                            stats_examples: 0,
                            band_note: None,
                            failed: Some(format!("baseline failed: {e}")),
                        });
                    }
                }
            }
        }
    }

    // aggregates: medians over seeds per (p, kinds)
    let mut groups: BTreeMap<(String, String), Vec<&SweepCell>> = BTreeMap::new();
    for cell in &cells {
        groups
            .entry((format!("{:020.6}", cell.p), cell.kinds.clone()))
            .or_default()
            .push(cell);
    }
    let mut aggregates = Vec::new();
    for ((_, kinds), group) in &groups {
        let ok: Vec<&&SweepCell> = group.iter().filter(|c| c.failed.is_none()).collect();
        if ok.is_empty() {
            continue;
        }
        let mut base: Vec<f64> = ok
            .iter()
            .map(|c| SweepCell::primary(c.baseline.as_ref().unwrap(), metric_name))
            .collect();
        let mut pruned: Vec<f64> = ok
            .iter()
            .map(|c| SweepCell::primary(c.pruned.as_ref().unwrap(), metric_name))
            .collect();
        let mut sparsity: Vec<f64> = ok
            .iter()
            .map(|c| c.sparsity.as_ref().unwrap().overall)
            .collect();
        let mut fractions: Vec<f64> = ok.iter().map(|c| c.mac_fraction.unwrap()).collect();
        aggregates.push(Aggregate {
            p: ok[0].p,
            kinds: kinds.clone(),
            metric_name,
            median_metric_baseline: median(&mut base),
            median_metric_pruned: median(&mut pruned),
            median_sparsity: median(&mut sparsity),
            median_mac_fraction: median(&mut fractions),
            seeds: ok.len(),
        });
    }

    write_json(
        &SweepReport {
            config: &exp.config,
            metric_name,
            cells: &cells,
            aggregates,
        },
        &exp.out_dir.join("report.json"),
    )?;
    write_json(&timings, &exp.out_dir.join("report_timing.json"))?;
    write_sweep_csv(&cells, &exp.out_dir.join("sweep.csv"))?;

    let failed = cells.iter().filter(|c| c.failed.is_some()).count();
    println!(
        "sweep: {} cells, {failed} failed -> {}",
        cells.len(),
        exp.out_dir.join("report.json").display()
    );
    Ok(failed == 0)
}

fn metrics_columns(m: Option<&EvalMetrics>) -> [String; 6] {
    match m {
        Some(m) => [
            m.loss.to_string(),
            m.perplexity.to_string(),
            m.token_accuracy.map(|v| v.to_string()).unwrap_or_default(),
            m.bleu.map(|v| v.to_string()).unwrap_or_default(),
            m.examples.to_string(),
            String::new(),
        ],
        None => Default::default(),
    }
}

/// Flat, loss-free view of the sweep report: every number in a cell's
/// JSON record appears in its row.
fn write_sweep_csv(cells: &[SweepCell], path: &Path) -> anyhow::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "seed,p,kinds,metric_name,metric_baseline,metric_pruned,\
         loss_baseline,ppl_baseline,acc_baseline,bleu_baseline,examples_baseline,\
         loss_pruned,ppl_pruned,acc_pruned,bleu_pruned,examples_pruned,\
         sparsity,sparsity_per_kind,sparsity_per_layer,mac_fraction,median_eval_len,\
         thresholds,mask_origin,stats_examples,baseline_ckpt_hash,band_note,failed"
    )?;
    for c in cells {
        let base = metrics_columns(c.baseline.as_ref());
        let pruned = metrics_columns(c.pruned.as_ref());
        let metric_base = c
            .baseline
            .as_ref()
            .map(|m| SweepCell::primary(m, c.metric_name).to_string())
            .unwrap_or_default();
        let metric_pruned = c
            .pruned
            .as_ref()
            .map(|m| SweepCell::primary(m, c.metric_name).to_string())
            .unwrap_or_default();
        let sparsity = c
            .sparsity
            .as_ref()
            .map(|s| s.overall.to_string())
            .unwrap_or_default();
        let per_kind = c
            .sparsity
            .as_ref()
            .map(|s| {
                s.per_kind
                    .iter()
                    .map(|(k, v)| format!("{}={v}", k.as_str()))
                    .collect::<Vec<_>>()
                    .join(";")
            })
            .unwrap_or_default();
        let per_layer = c
            .sparsity
            .as_ref()
            .map(|s| {
                s.per_layer
                    .iter()
                    .map(|(k, l, v)| format!("{}/{l}={v}", k.as_str()))
                    .collect::<Vec<_>>()
                    .join(";")
            })
            .unwrap_or_default();
        let thresholds = c
            .thresholds
            .iter()
            .map(|t| format!("{}/{}={}", t.kind.as_str(), t.layer, t.tau))
            .collect::<Vec<_>>()
            .join(";");
        let origin = c
            .mask_origin
            .map(|o| format!("{o:?}").to_lowercase())
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.seed,
            c.p,
            c.kinds,
            c.metric_name,
            metric_base,
            metric_pruned,
            base[0],
            base[1],
            base[2],
            base[3],
            base[4],
            pruned[0],
            pruned[1],
            pruned[2],
            pruned[3],
            pruned[4],
            sparsity,
            quote(&per_kind),
            quote(&per_layer),
            c.mac_fraction.map(|v| v.to_string()).unwrap_or_default(),
            c.median_eval_len.map(|v| v.to_string()).unwrap_or_default(),
            quote(&thresholds),
            origin,
            c.stats_examples,
            c.baseline_checkpoint_hash,
            quote(c.band_note.as_deref().unwrap_or("")),
            quote(c.failed.as_deref().unwrap_or("")),
        )?;
    }
    Ok(())
}

fn quote(v: &str) -> String {
    if v.contains(',') || v.contains('"') {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

// ---------------------------------------------------------------------------
// cost
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CostRow {
    p: f64,
    fraction: f64,
    analytical: attnprune::cost::MacBreakdown,
    instrumented_total: Option<u64>,
    instrumented_fraction: Option<f64>,
}

#[derive(Serialize)]
struct CostDoc {
    d_model: usize,
    seq_len: usize,
    batch: usize,
    heads: usize,
    rows: Vec<CostRow>,
}

pub fn cmd_cost(
    out_dir: &Path,
    d_model: usize,
    seq_len: usize,
    p_list: &[f64],
    heads: usize,
    verify: bool,
) -> anyhow::Result<()> {
    ensure_dir(out_dir)?;
    let dense_total = attention_macs(&CostParams::new(1, seq_len, d_model, heads, 0.0)?)?.total;
    let mut rows = Vec::new();
    println!("d={d_model} N={seq_len} h={heads}");
    println!("{:>6} {:>10} {:>14} {:>14}", "p", "fraction", "total MACs", "instrumented");
    for &p in p_list {
        let params = CostParams::new(1, seq_len, d_model, heads, p)?;
        let analytical = attention_macs(&params)?;
        let fraction = mac_fraction(d_model, seq_len, p)?;
        let (instr_total, instr_fraction) = if verify {
            let attn = InstrumentedAttention::seeded(params, 7);
            let x: Vec<f64> = (0..seq_len * d_model)
                .map(|i| ((i * 2654435761) % 1000) as f64 / 1000.0 - 0.5)
                .collect();
            let target = (p * (seq_len * seq_len) as f64).round() as usize;
            let mask: Vec<bool> = (0..heads)
                .flat_map(|_| {
                    (0..seq_len * seq_len).map(move |idx| idx < target)
                })
                .collect();
            let mut counted = 0u64;
            attn.forward(&x, Some(&mask), Some(&mut counted))?;
            (Some(counted), Some(counted as f64 / dense_total))
        } else {
            (None, None)
        };
        println!(
            "{:>6} {:>10.6} {:>14} {:>14}",
            p,
            fraction,
            analytical.total,
            instr_total.map(|t| t.to_string()).unwrap_or_else(|| "-".into())
        );
        rows.push(CostRow {
            p,
            fraction,
            analytical,
            instrumented_total: instr_total,
            instrumented_fraction: instr_fraction,
        });
    }
    write_json(
        &CostDoc {
            d_model,
            seq_len,
            batch: 1,
            heads,
            rows,
        },
        &out_dir.join("cost.json"),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

fn write_matrix_csv(path: &Path, rows: usize, cols: usize, cell: impl Fn(usize, usize) -> String) -> anyhow::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..rows {
        let line: Vec<String> = (0..cols).map(|j| cell(i, j)).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn cmd_inspect(out_dir: &Path, file: &Path, layer_avg_only: bool) -> anyhow::Result<()> {
    let inspect_dir = out_dir.join("inspect");
    ensure_dir(&inspect_dir)?;
    let doc: serde_json::Value = serde_json::from_slice(
        &std::fs::read(file).with_context(|| format!("cannot read {}", file.display()))?,
    )?;
    let written = if doc.get("heads").and_then(|h| h.get(0)).map(|h| h.get("sum").is_some()).unwrap_or(false)
    {
        inspect_stats(&inspect_dir, file, layer_avg_only)?
    } else if doc.get("heads").is_some() {
        inspect_mask(&inspect_dir, file, layer_avg_only)?
    } else {
        bail!("{} is neither a stats nor a mask file", file.display());
    };
    println!("wrote {written} CSV files under {}", inspect_dir.display());
    Ok(())
}

fn layer_groups<T: Clone>(
    heads: &BTreeMap<HeadKey, T>,
) -> BTreeMap<(AttentionKind, usize), Vec<HeadKey>> {
    let mut groups: BTreeMap<(AttentionKind, usize), Vec<HeadKey>> = BTreeMap::new();
    for key in heads.keys() {
        groups.entry((key.kind, key.layer)).or_default().push(*key);
    }
    groups
}

fn inspect_stats(dir: &Path, file: &Path, layer_avg_only: bool) -> anyhow::Result<usize> {
    let stats = load_stats(file)?;
    let avg = stats.average()?;
    let mut written = 0;
    let fmt = |value: f64, visited: bool| -> String {
        if visited {
            value.to_string()
        } else {
            "nan".into()
        }
    };
    if !layer_avg_only {
        for (key, head) in &avg.heads {
            let path = dir.join(format!(
                "avg_{}_l{}_h{}.csv",
                key.kind.as_str(),
                key.layer,
                key.head
            ));
            write_matrix_csv(&path, head.n_max, head.m_max, |i, j| {
                fmt(head.value[i * head.m_max + j], head.visited[i * head.m_max + j])
            })?;
            written += 1;
        }
    }
    for ((kind, layer), keys) in layer_groups(&avg.heads) {
        let first = &avg.heads[&keys[0]];
        let (n, m) = (first.n_max, first.m_max);
        let path = dir.join(format!("avg_{}_l{layer}.csv", kind.as_str()));
        write_matrix_csv(&path, n, m, |i, j| {
            let idx = i * m + j;
            // heads of one layer share visitation: every example passes
            // through every head
            let visited = first.visited[idx];
            if !visited {
                return "nan".into();
            }
            let mean = keys
                .iter()
                .map(|k| avg.heads[k].value[idx])
                .sum::<f64>()
                / keys.len() as f64;
            mean.to_string()
        })?;
        written += 1;
    }
    Ok(written)
}

fn inspect_mask(dir: &Path, file: &Path, layer_avg_only: bool) -> anyhow::Result<usize> {
    let mask = load_masks(file)?;
    let mut written = 0;
    let keys: Vec<HeadKey> = mask.head_keys().collect();
    let mut groups: BTreeMap<(AttentionKind, usize), Vec<HeadKey>> = BTreeMap::new();
    for key in &keys {
        groups.entry((key.kind, key.layer)).or_default().push(*key);
    }
    if !layer_avg_only {
        for key in &keys {
            let (n, m) = mask_dims(&mask, key);
            let path = dir.join(format!(
                "mask_{}_l{}_h{}.csv",
                key.kind.as_str(),
                key.layer,
                key.head
            ));
            write_matrix_csv(&path, n, m, |i, j| {
                if mask.is_pruned(key, i, j) { "1" } else { "0" }.to_string()
            })?;
            written += 1;
        }
    }
    for ((kind, layer), keys) in groups {
        let (n, m) = mask_dims(&mask, &keys[0]);
        let path = dir.join(format!("mask_{}_l{layer}.csv", kind.as_str()));
        write_matrix_csv(&path, n, m, |i, j| {
            let mean = keys
                .iter()
                .map(|k| if mask.is_pruned(k, i, j) { 1.0 } else { 0.0 })
                .sum::<f64>()
                / keys.len() as f64;
            mean.to_string()
        })?;
        written += 1;
    }
    Ok(written)
}

fn mask_dims(mask: &MaskSet, key: &HeadKey) -> (usize, usize) {
    mask.head_dims(key).expect("listed head exists")
}
