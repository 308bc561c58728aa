#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vibspk::config::ExperimentConfig;
use vibspk::pipeline::{self, Layout};
use vibspk::{Error, Result};

/// Maximum relative gradient error accepted by `grad-check`.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "vibspk",
    version,
    about = "Speaker-embedding training and evaluation on synthetic populations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (flat key = value file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory shared by all commands.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Checkpoint to extract from (defaults to the final training checkpoint).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic corpus, trial list, and enrollment map.
    GenData,
    /// Train a model on the training split.
    Train,
    /// Extract embeddings for every split.
    Extract,
    /// Score the trial list.
    Score,
    /// Compute EER and minimum detection cost from the score file.
    Eval,
    /// Compare analytic and finite-difference gradients.
    GradCheck,
}

fn run(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let layout = Layout::new(&cli.out);
    match cli.command {
        Command::GenData => {
            let summary = pipeline::cmd_gen_data(&cfg, &layout)?;
            println!("{summary}");
        }
        Command::Train => {
            pipeline::cmd_train(&cfg, &layout)?;
            println!("final checkpoint: {}", layout.final_checkpoint().display());
        }
        Command::Extract => {
            let ck = cli.checkpoint.clone().unwrap_or_else(|| layout.final_checkpoint());
            for (split, n) in pipeline::cmd_extract(&cfg, &layout, &ck)? {
                println!("{split}: {n} embeddings");
            }
        }
        Command::Score => {
            let n = pipeline::cmd_score(&cfg, &layout)?;
            println!("scored {n} trials: {}", layout.scores().display());
        }
        Command::Eval => {
            println!("{}", pipeline::cmd_eval(&cfg, &layout)?);
        }
        Command::GradCheck => {
            let report = pipeline::cmd_grad_check(&cfg)?;
            println!("{report}");
            if !(report.max_error() < GRAD_TOLERANCE) {
                return Err(Error::Numeric(format!(
                    "max relative gradient error {:.3e} exceeds {GRAD_TOLERANCE:e}",
                    report.max_error()
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
