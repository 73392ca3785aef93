use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ncap_core::experiments::{cmd_ablate, cmd_eval, cmd_rollout, cmd_train, cmd_transfer, ExperimentConfig};
use ncap_core::{NcapError, Result};

#[derive(Parser, Debug)]
#[command(name = "ncap-swim", version, about = "Train and analyse circuit-prior swimmer controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Train the configured policy for every seed.
    Train(#[command(flatten)] Common),
    /// Evaluate a checkpoint and report return per parameter.
    Eval(#[command(flatten)] Common),
    /// Run the sharing/sign/init ablation grid plus the dense cell.
    Ablate(#[command(flatten)] Common),
    /// Zero-shot evaluation of a circuit checkpoint on other body sizes.
    Transfer(#[command(flatten)] Common),
    /// Write a traced rollout as JSONL.
    Rollout(#[command(flatten)] Common),
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run this single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Environment-step budget per training run.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Body sizes for transfer, e.g. 3,5,8,12.
    #[arg(long, value_delimiter = ',')]
    nprime: Option<Vec<usize>>,
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(budget) = common.budget {
        cfg.es.total_timesteps = budget;
    }
    if let Some(ckpt) = &common.checkpoint {
        cfg.checkpoint = Some(ckpt.clone());
    }
    if let Some(nprime) = &common.nprime {
        cfg.nprime = nprime.clone();
    }
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("NCAP_SWIM_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| NcapError::Config(format!("NCAP_SWIM_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| NcapError::Config(format!("cannot size the thread pool: {e}")))
}

fn run(command: Command) -> Result<()> {
    configure_threads()?;
    match command {
        Command::Train(c) => {
            let run = cmd_train(&load(&c)?)?;
            for (seed, ret) in run.runs.iter().map(|r| r.seed).zip(run.final_returns()) {
                println!("seed {seed}: final return {ret:.2}");
            }
            println!("wrote {}", run.dir.display());
        }
        Command::Eval(c) => {
            let row = cmd_eval(&load(&c)?)?;
            println!(
                "{}: mean {:.2} std {:.2} params {} return/param {:.3}",
                row.label, row.mean_return, row.std_return, row.param_count, row.return_per_param
            );
        }
        Command::Ablate(c) => {
            let run = cmd_ablate(&load(&c)?, None)?;
            println!("wrote {}", run.manifest_path.display());
        }
        Command::Transfer(c) => {
            for row in cmd_transfer(&load(&c)?)? {
                println!("N'={}: mean {:.2} ({:.0}% of source)", row.n_joints, row.mean_return, 100.0 * row.relative_return);
            }
        }
        Command::Rollout(c) => {
            let run = cmd_rollout(&load(&c)?)?;
            println!("return {:.2}, wrote {}", run.summary.episode_return, run.path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are config errors; --help and --version are not errors.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
