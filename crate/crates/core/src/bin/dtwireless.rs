use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dtwireless::pipeline::{self, RunConfig};
use dtwireless::ppo::mean_std;

#[derive(Parser)]
#[command(version, about = "Decision-transformer pipeline for simulated IRS and UAV-MEC tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train PPO on the source scenarios and write a dataset.
    Collect(Common),
    /// Pre-train the decision transformer on the dataset.
    Pretrain(Common),
    /// Adapt the pre-trained model to the target scenario.
    Finetune(Common),
    /// Roll out a checkpoint or the random policy.
    Evaluate(Common),
    /// Fine-tuned model vs PPO from scratch vs random on the target scenario.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let (Command::Collect(c) | Command::Pretrain(c) | Command::Finetune(c) | Command::Evaluate(c) | Command::Compare(c)) =
        &cli.command;
    let cfg = RunConfig::load(&c.config).with_context(|| format!("loading {}", c.config.display()))?;
    let (seed, out) = (c.seed, c.out.as_path());
    match &cli.command {
        Command::Collect(_) => {
            let r = pipeline::cmd_collect(&cfg, seed, out)?;
            println!("collected {} trajectories", r.dataset.trajectories.len());
        }
        Command::Pretrain(_) => {
            let r = pipeline::cmd_pretrain(&cfg, seed, out)?;
            println!(
                "loss {:.4} -> {:.4}",
                r.losses.first().copied().unwrap_or(f64::NAN),
                r.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Finetune(_) => {
            let r = pipeline::cmd_finetune(&cfg, seed, out)?;
            println!(
                "zero-shot {:.2}, fine-tuned {:.2}",
                mean_std(&r.zero_shot).0,
                mean_std(&r.finetuned).0
            );
        }
        Command::Evaluate(_) => {
            let r = pipeline::cmd_evaluate(&cfg, seed, out)?;
            let (m, s) = mean_std(&r.returns);
            println!("{}: {m:.2} +- {s:.2} over {} episodes", r.scenario_id, r.returns.len());
        }
        Command::Compare(_) => {
            let r = pipeline::cmd_compare(&cfg, seed, out)?;
            match r.speedup.ratio() {
                Some(x) => println!("speedup {x:.2}"),
                None => println!("speedup undefined: a curve never reached {:.2}", r.speedup.level),
            }
        }
    }
    Ok(())
}
