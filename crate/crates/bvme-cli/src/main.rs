//! Command line front end: run one experiment, sweep an axis, or summarize
//! result files. Exits nonzero on any configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use bvme_core::harness::{
    collect_results, compute_auc, run_experiment, sweep, ExperimentConfig, SweepAxis,
};

#[derive(Parser)]
#[command(name = "bvme", version, about = "Bandwidth-constrained message training runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of one experiment config.
    Run {
        /// TOML experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Directory for result files (default: ./results).
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Run one config across a sweep axis and write a summary CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of: r, kl_grid, coupling, backbone.
        #[arg(long)]
        axis: String,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Print a table of every result.json under a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::from_toml_path(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            for w in cfg.warnings() {
                eprintln!("warning: {w}");
            }
            let result = run_experiment(&cfg, &out)?;
            println!(
                "{}: final success {:.4} +/- {:.4} over {} seeds",
                result.name,
                result.final_success,
                result.final_success_stderr,
                result.seeds.len()
            );
            match result.auc {
                Some(a) => println!("auc {:.6}", a),
                None => println!("auc n/a (single-point curve)"),
            }
            println!("results in {}", out.join(&result.name).display());
            Ok(())
        }
        Command::Sweep { config, axis, out } => {
            let cfg = ExperimentConfig::from_toml_path(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            for w in cfg.warnings() {
                eprintln!("warning: {w}");
            }
            let axis = SweepAxis::parse(&axis)?;
            let outcome = sweep(&cfg, axis, &out)?;
            let failed = outcome.cells.iter().filter(|c| c.error.is_some()).count();
            println!(
                "swept {} over {} cells ({} failed)",
                axis.as_str(),
                outcome.cells.len(),
                failed
            );
            for cell in &outcome.cells {
                match (&cell.error, &cell.result) {
                    (Some(e), _) => println!("  {} -> error: {e}", cell.axis_value),
                    (None, Some(r)) => println!(
                        "  {} -> final {:.4}, auc {}",
                        cell.axis_value,
                        r.final_success,
                        r.auc.map(|a| format!("{a:.6}")).unwrap_or_else(|| "n/a".into())
                    ),
                    (None, None) => {}
                }
            }
            println!("summary {}", outcome.csv_path.display());
            Ok(())
        }
        Command::Report { dir } => {
            let results = collect_results(&dir)?;
            if results.is_empty() {
                anyhow::bail!("no result.json files under {}", dir.display());
            }
            println!(
                "{:<28} {:>10} {:>6} {:>10} {:>10} {:>10}",
                "name", "method", "r", "auc", "final", "stderr"
            );
            for r in &results {
                // Guard against stale or hand-edited files: the stored AUC
                // must match the stored curve.
                if let Some(stored) = r.auc {
                    let fresh = compute_auc(&r.curve)?;
                    if (fresh - stored).abs() > 1e-12 {
                        anyhow::bail!("{}: stored auc {} disagrees with curve ({})", r.name, stored, fresh);
                    }
                }
                println!(
                    "{:<28} {:>10} {:>6} {:>10} {:>10.4} {:>10.4}",
                    r.name,
                    r.method.as_str(),
                    r.r,
                    r.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into()),
                    r.final_success,
                    r.final_success_stderr
                );
            }
            Ok(())
        }
    }
}
