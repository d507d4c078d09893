//! `pdefm`: data generation, training, fine-tuning, evaluation and
//! inspection from one binary.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "pdefm", version, about = "Shape-agnostic PDE surrogate: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Options shared by the training commands.
#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run directory; defaults to the config's `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus with normalization stats.
    GenData(commands::GenArgs),
    /// Recompute and store training-split normalization stats.
    Stats(commands::StatsArgs),
    /// Autoregressive pretraining on the configured datasets.
    Pretrain(commands::PretrainArgs),
    /// Fine-tune a pretrained checkpoint at one of four levels.
    Finetune(commands::FinetuneArgs),
    /// Single-step metrics of a checkpoint and the persistence baseline.
    Evaluate(commands::EvalArgs),
    /// Autoregressive rollout with per-step metrics.
    Rollout(commands::RolloutArgs),
    /// Describe a container or checkpoint.
    Inspect(commands::InspectArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.cmd {
        Cmd::GenData(a) => commands::gen_data(a),
        Cmd::Stats(a) => commands::stats(a),
        Cmd::Pretrain(a) => commands::pretrain(a),
        Cmd::Finetune(a) => commands::finetune(a),
        Cmd::Evaluate(a) => commands::evaluate(a),
        Cmd::Rollout(a) => commands::rollout(a),
        Cmd::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
