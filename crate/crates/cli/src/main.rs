use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gps_core::harness::{self, RunConfig};
use gps_core::Result;

/// Gradient-based parameter selection: pretrain, select, fine-tune, evaluate, compare, report.
#[derive(Parser)]
#[command(name = "gps", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base model on the configured source task.
    Pretrain(Common),
    /// Build a selection mask for the target task.
    Select(Common),
    /// Fine-tune under a mask; writes checkpoint, sparse delta and metrics.
    Finetune(Common),
    /// Evaluate a checkpoint on the validation split.
    Eval(Common),
    /// Run strategy / K comparisons against one base checkpoint.
    Compare(Common),
    /// Distribution or overlap report over saved masks.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Connections per neuron (select.k, or compare.k for compare).
    #[arg(long)]
    k: Option<String>,
    /// Selection strategy (select.strategy, or compare.strategies for compare).
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self, compare: bool) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(k) = &self.k {
            cfg.set(if compare { "compare.k" } else { "select.k" }, k)?;
        }
        if let Some(s) = &self.strategy {
            cfg.set(if compare { "compare.strategies" } else { "select.strategy" }, s)?;
        }
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        if let Some(out) = &self.out {
            cfg.set("out", &out.display().to_string())?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                gps_core::GpsError::Config(format!("--set expects KEY=VALUE, got '{kv}'"))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let out = harness::run_pretrain(&c.resolve(false)?)?;
            if let Some(last) = out.history.last() {
                println!("final epoch {}: train_loss {:.6} val_acc {:.4}", last.epoch, last.train_loss, last.val_acc);
            }
            println!("checkpoint {} (digest {:016x})", out.checkpoint.display(), out.digest);
        }
        Command::Select(c) => {
            let out = harness::run_select(&c.resolve(false)?)?;
            print!("{}", out.summary);
            println!("mask {}", out.mask_path.display());
        }
        Command::Finetune(c) => {
            let out = harness::run_finetune(&c.resolve(false)?)?;
            if let Some(last) = out.history.last() {
                println!("final epoch {}: train_loss {:.6} val_acc {:.4}", last.epoch, last.train_loss, last.val_acc);
            }
            println!("checkpoint {}", out.checkpoint.display());
            println!("delta {}", out.delta.display());
            println!("metrics {}", out.metrics.display());
        }
        Command::Eval(c) => {
            let e = harness::run_eval(&c.resolve(false)?)?;
            println!("accuracy {:.6} loss {:.6}", e.accuracy, e.loss);
        }
        Command::Compare(c) => {
            let out = harness::run_compare(&c.resolve(true)?)?;
            print!(
                "{}",
                std::fs::read_to_string(&out.summary_csv)
                    .map_err(|e| gps_core::GpsError::io(&out.summary_csv, e))?
            );
            let failed = out.rows.iter().filter(|r| r.outcome.is_err()).count();
            if failed > 0 {
                eprintln!("{failed} comparison row(s) failed; see {}", out.results_csv.display());
            }
        }
        Command::Report(c) => {
            print!("{}", harness::run_report(&c.resolve(false)?)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
