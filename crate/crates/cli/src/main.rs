//! `logitlab` command-line driver.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use logitlab::data::Corpus;
use logitlab::harness::{self, RunConfig, SweepGrid};

#[derive(Parser)]
#[command(name = "logitlab", version, about = "Train small language models with different LM-head strategies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single run from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Corpus text file; overrides the config's `data`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run every cell of a sweep grid.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write LRS, optimal-loss and overhead tables for a sweep directory.
    Analyze { dir: PathBuf },
    /// Write B_ratio of every checkpoint under a directory.
    Bratio { dir: PathBuf },
    /// Write raw CSVs for plotting.
    Curves { dir: PathBuf },
}

fn load_corpus(data: Option<&Path>, config: &RunConfig) -> Result<Corpus> {
    match data.or(config.data.as_deref()) {
        Some(path) => {
            let cache = config.out_dir.join(".corpus-cache");
            Corpus::load_cached(path, config.test_fraction, &cache)
                .with_context(|| format!("loading corpus {}", path.display()))
        }
        None => {
            eprintln!("no corpus given, using the bundled fixture text");
            Ok(Corpus::fixture())
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, data } => {
            let mut cfg = RunConfig::load(&config)
                .with_context(|| format!("reading config {}", config.display()))?;
            if data.is_some() {
                cfg.data = data;
            }
            let corpus = load_corpus(None, &cfg)?;
            let rec = harness::run_train(&cfg, &corpus)?;
            println!("{}", serde_json::to_string_pretty(&rec.summary)?);
        }
        Command::Sweep { grid, jobs, data } => {
            let mut g = SweepGrid::load(&grid)
                .with_context(|| format!("reading grid {}", grid.display()))?;
            if data.is_some() {
                g.base.data = data;
            }
            let corpus = load_corpus(None, &g.base)?;
            let report = harness::run_sweep(&g, &corpus, jobs)?;
            let failed = report.rows.iter().filter(|r| !r.is_complete()).count();
            println!(
                "{} cells, {failed} failed; summary in {}",
                report.rows.len(),
                report.dir.join("summary.csv").display()
            );
        }
        Command::Analyze { dir } => {
            let report = harness::analyze(&dir)?;
            println!("strategy,size,tying,lambda,lrs,optimal_loss,overhead_pct");
            for (k, s) in &report.groups {
                println!(
                    "{},{},{},{},{:.4},{:.4},{:.2}",
                    k.strategy, k.size, k.tying, k.lambda, s.lrs, s.optimal_loss, s.overhead_pct
                );
            }
            if !report.missing.is_empty() {
                eprintln!("missing runs: {}", report.missing.join(", "));
            }
        }
        Command::Bratio { dir } => {
            let rows = harness::bratio_report(&dir)?;
            for r in rows {
                match r.record {
                    Some(b) => println!("{} b_ratio={:.4}", r.run_id, b.b_ratio),
                    None => println!("{} {}", r.run_id, r.status),
                }
            }
        }
        Command::Curves { dir } => {
            for p in harness::curves(&dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
