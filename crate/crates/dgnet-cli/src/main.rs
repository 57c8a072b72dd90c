//! dgnet command line: train, eval, ablate, cost, export-graph and
//! randwire-compare over a declarative TOML run configuration.
//!
//! Any scalar config field can be overridden on the command line with
//! `--section.key=value` (for example `--training.epochs=32`); overrides
//! pass through the same validation as the config file.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use dgnet::config::{extract_overrides, RunConfig};
use dgnet::experiments;

#[derive(Parser)]
#[command(name = "dgnet", version, about = "dynamic graph network experiments")]
struct Cli {
    /// Run configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.bin, metrics.csv and the resolved
    /// config into the output directory.
    Train,
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        /// Checkpoint file (defaults to <out>/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Apply the config's threshold policy during inference.
        #[arg(long)]
        pruned: bool,
    },
    /// Train baseline, static-alpha and dynamic connectivity with shared
    /// seeds and report the accuracy table.
    Ablate {
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
    /// Print the parameter / multiply-add report for the configured model.
    Cost,
    /// Export per-sample connectivity as DOT graphs and an edge CSV.
    ExportGraph {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated dataset sample indices.
        #[arg(long, default_value = "0")]
        samples: String,
    },
    /// Compare static ER/BA/WS wirings against the dynamic complete graph.
    RandwireCompare {
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| anyhow::anyhow!("bad {what} entry {s:?}"))
        })
        .collect()
}

fn out_dir(cli_out: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| {
        if cfg.output_dir.is_empty() {
            PathBuf::from("runs/default")
        } else {
            PathBuf::from(&cfg.output_dir)
        }
    })
}

fn run() -> Result<()> {
    let raw: Vec<String> = std::env::args().collect();
    let (overrides, rest) = extract_overrides(&raw);
    let cli = Cli::parse_from(rest);
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)
        .context("loading run configuration")?;
    let out = out_dir(&cli.out, &cfg);

    match cli.command {
        Command::Train => {
            let outcome = experiments::train_run(&cfg, &out)?;
            println!(
                "trained {} steps; final eval accuracy {:.4}, best {:.4}",
                outcome.state.step, outcome.final_acc, outcome.best_acc
            );
            println!("artifacts in {}", out.display());
        }
        Command::Eval { checkpoint, pruned } => {
            let ckpt = checkpoint.unwrap_or_else(|| out.join("checkpoint.bin"));
            anyhow::ensure!(ckpt.is_file(), "checkpoint {} not found", ckpt.display());
            let acc = experiments::eval_checkpoint(&cfg, &ckpt, pruned)?;
            println!("eval accuracy: {acc:.4}{}", if pruned { " (pruned)" } else { "" });
        }
        Command::Ablate { seeds } => {
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            anyhow::ensure!(!seeds.is_empty(), "need at least one seed");
            let report = experiments::run_ablation(&cfg, &seeds)?;
            print!("{report}");
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("ablation.csv"), report.to_csv())?;
            std::fs::write(out.join("resolved_config.toml"), cfg.to_toml_string())?;
            println!("table written to {}", out.join("ablation.csv").display());
        }
        Command::Cost => {
            let report = experiments::cost_report(&cfg)?;
            print!("{report}");
        }
        Command::ExportGraph {
            checkpoint,
            samples,
        } => {
            let samples: Vec<usize> = parse_list(&samples, "sample index")?;
            anyhow::ensure!(!samples.is_empty(), "need at least one sample index");
            let ckpt = checkpoint.or_else(|| {
                let p = out.join("checkpoint.bin");
                p.is_file().then_some(p)
            });
            let written =
                experiments::export_graphs(&cfg, ckpt.as_deref(), &samples, &out)?;
            println!("wrote {} files to {}", written.len(), out.display());
        }
        Command::RandwireCompare { seeds } => {
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            anyhow::ensure!(!seeds.is_empty(), "need at least one seed");
            let report = experiments::run_randwire_compare(&cfg, &seeds)?;
            print!("{report}");
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("randwire.csv"), report.to_csv())?;
            std::fs::write(out.join("resolved_config.toml"), cfg.to_toml_string())?;
            println!("table written to {}", out.join("randwire.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
