//! Attention-pruning workflow CLI.
//!
//! Exit codes: 0 on success, 1 when an experiment fails, 2 for usage or
//! configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "attnprune", version, about = "Train, prune and measure small attention models")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run only this seed, overriding the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel workers for sweep cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train baseline models and write checkpoints, logs and metrics.
    Train {
        /// Also export the generated dataset as text files.
        #[arg(long)]
        export_data: bool,
    },
    /// Average attention over the train split with a trained checkpoint.
    Collect {
        /// Checkpoint base path (without extension).
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Build a prune-mask file from collected statistics.
    Mask {
        #[arg(long)]
        stats: PathBuf,
        /// Prune percentage in [0, 100].
        #[arg(long)]
        p: f64,
        /// Comma-separated attention kinds (defaults to the config's set).
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<String>>,
        /// Build a random baseline mask with this seed instead.
        #[arg(long)]
        random_seed: Option<u64>,
        /// Reuse a mask file built on another dataset (shape-validated).
        #[arg(long)]
        ood: Option<PathBuf>,
        /// Output file (defaults into the output directory).
        #[arg(long)]
        out_file: Option<PathBuf>,
    },
    /// Retrain under a mask file and report masked test metrics.
    Retrain {
        #[arg(long)]
        mask: PathBuf,
    },
    /// Full grid: per seed, train a baseline, collect statistics, then
    /// mask and retrain for every (p, kinds) cell.
    Sweep,
    /// Analytical MAC table, optionally verified against an instrumented
    /// forward pass.
    Cost {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        n: usize,
        /// Comma-separated prune fractions in [0, 1].
        #[arg(long, value_delimiter = ',')]
        p: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        #[arg(long)]
        verify: bool,
    },
    /// Render a stats or mask file as CSV matrices.
    Inspect {
        #[arg(long)]
        file: PathBuf,
        /// Emit only the per-layer averages.
        #[arg(long)]
        layer_avg: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

/// Usage and configuration problems exit 2; experiment failures exit 1.
fn classify(err: &anyhow::Error) -> u8 {
    let config_shaped = err.chain().any(|cause| {
        if let Some(e) = cause.downcast_ref::<attnprune::Error>() {
            matches!(e, attnprune::Error::Config(_))
        } else {
            cause.to_string().starts_with("config:")
        }
    });
    if config_shaped {
        2
    } else {
        1
    }
}

fn require_experiment(cli: &Cli) -> anyhow::Result<config::Experiment> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("config: this command needs --config PATH"))?;
    config::load_config(path)?.resolve(cli.out.clone(), cli.seed)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Train { export_data } => {
            let exp = require_experiment(&cli)?;
            commands::cmd_train(&exp, *export_data)?;
            Ok(true)
        }
        Command::Collect { ckpt } => {
            let exp = require_experiment(&cli)?;
            commands::cmd_collect(&exp, ckpt)?;
            Ok(true)
        }
        Command::Mask {
            stats,
            p,
            kinds,
            random_seed,
            ood,
            out_file,
        } => {
            let exp = require_experiment(&cli)?;
            commands::cmd_mask(
                &exp,
                &commands::MaskArgs {
                    stats_path: stats,
                    p: *p,
                    kinds: kinds.clone(),
                    random_seed: *random_seed,
                    ood: ood.clone(),
                    out_file: out_file.clone(),
                },
            )?;
            Ok(true)
        }
        Command::Retrain { mask } => {
            let exp = require_experiment(&cli)?;
            commands::cmd_retrain(&exp, mask)?;
            Ok(true)
        }
        Command::Sweep => {
            let exp = require_experiment(&cli)?;
            commands::cmd_sweep(&exp, cli.jobs)
        }
        Command::Cost {
            d,
            n,
            p,
            heads,
            verify,
        } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            commands::cmd_cost(&out, *d, *n, p, *heads, *verify)?;
            Ok(true)
        }
        Command::Inspect { file, layer_avg } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            commands::cmd_inspect(&out, file, *layer_avg)?;
            Ok(true)
        }
    }
}
