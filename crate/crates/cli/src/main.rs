mod commands;
mod layout;
mod pool;
mod report;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand};
use tidn_core::harness::Suite;

use crate::commands::Context;
use crate::layout::Layout;

#[derive(Parser, Debug)]
#[command(name = "tidn", version, about = "Task-informed fine-tuning of CT denoisers: data, training, sweeps and reports")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker processes for grid cells.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CellArgs {
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    #[arg(long, default_value_t = 3)]
    n_train: usize,
    /// Network depth (default: the config's).
    #[arg(long)]
    depth: Option<usize>,
    /// slnn-no, slnn-ho, or none for the pretrained baseline.
    #[arg(long)]
    observer: Option<String>,
    /// Task whose data drives fine-tuning (default: the target task).
    #[arg(long)]
    source: Option<String>,
    /// Task evaluated on (default: the primary task).
    #[arg(long)]
    target: Option<String>,
    /// Seed of the cell, e.g. one read back from a record file.
    #[arg(long)]
    cell_seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate and store the train/validation/test splits.
    GenData {
        /// Tasks to generate (default: all).
        #[arg(long)]
        task: Vec<String>,
    },
    /// Pretrain the denoiser on the primary task with the MSE loss.
    Pretrain {
        /// Depths (default: the grid's).
        #[arg(long)]
        depth: Vec<usize>,
    },
    /// Fine-tune and evaluate one grid cell.
    Finetune(CellArgs),
    /// Every λ × N_train × observer cell of the grid, plus the pretrained baseline.
    Sweep {
        #[arg(long)]
        depth: Vec<usize>,
        #[arg(long)]
        no_baseline: bool,
        /// Ignore stored records and run every cell again.
        #[arg(long)]
        recompute: bool,
    },
    /// Shifted and reference cells for every configured task pair.
    TaskShift {
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        recompute: bool,
    },
    /// Covariance spectra of denoised images, pretrained and fine-tuned.
    Spectra {
        /// λ values of the fine-tuned variants (default: grid ends).
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Tables and plots from record files or directories of them.
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        /// Combine records from different configs or seeds.
        #[arg(long)]
        force: bool,
    },
    /// Run the acceptance criteria.
    Acceptance {
        #[arg(long, default_value = "fast")]
        suite: String,
        /// Bundled testbed when no --config is given: compact or desk.
        #[arg(long, default_value = "compact")]
        scale: String,
        /// Fixture cache (default: <out>/acceptance/fixtures).
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
}

fn context(cli: &Cli) -> Result<Context> {
    let path = cli.config.as_deref().context("--config is required for this command")?;
    Context::load(path, cli.seed, cli.out.as_deref(), cli.workers)
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData { task } => commands::gen_data(&context(&cli)?, task)?,
        Command::Pretrain { depth } => commands::pretrain(&context(&cli)?, depth)?,
        Command::Finetune(a) => {
            let ctx = context(&cli)?;
            let cell = commands::parse_cell(&ctx, a.lambda, a.n_train, a.depth, a.observer.as_deref(), a.source.as_deref(), a.target.as_deref())?;
            commands::run_one(&ctx, &cell, a.cell_seed)?;
        }
        Command::Sweep { depth, no_baseline, recompute } => commands::sweep(&context(&cli)?, depth, !no_baseline, *recompute)?,
        Command::TaskShift { depth, recompute } => commands::task_shift(&context(&cli)?, *depth, *recompute)?,
        Command::Spectra { lambdas, depth } => commands::spectra(&context(&cli)?, lambdas, *depth)?,
        Command::Report { records, force } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            commands::report(records, &Layout::new(out).report_dir(), *force)?;
        }
        Command::Acceptance { suite, scale, fixtures } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            return commands::acceptance(cli.config.as_deref(), scale, suite.parse::<Suite>()?, &out, fixtures.as_deref());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_secs().init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
