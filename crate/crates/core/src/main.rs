use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedin_core::config::parse_config;
use fedin_core::harness::{check_grads, compare_runs, run_experiment, threads_from_env};
use fedin_core::RunMode;

#[derive(Parser)]
#[command(name = "fedin", version, about = "FedIN federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<RunMode>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Metrics CSV; checkpoints go to <stem>_checkpoints/ beside it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-round accuracy deltas (b - a) between two metrics CSVs.
    Compare { csv_a: PathBuf, csv_b: PathBuf },
    /// Finite-difference and projection-oracle self checks.
    CheckGrads {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> fedin_core::Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            seed,
            mode,
            rounds,
            out,
        } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(r) = rounds {
                cfg.num_rounds = r;
            }
            cfg.validate()?;
            let (_, summary) = run_experiment(&cfg, out.as_deref(), threads_from_env()?)?;
            println!(
                "mode {}  rounds {}  final mean accuracy {:.4}  best {:.4} at round {}  last-10 mean {:.4}",
                cfg.mode,
                summary.rounds,
                summary.final_mean_accuracy,
                summary.best_mean_accuracy,
                summary.best_round,
                summary.last10_mean_accuracy
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { csv_a, csv_b } => {
            let cmp = compare_runs(&csv_a, &csv_b)?;
            println!("round,delta_mean_accuracy");
            for (round, d) in &cmp.deltas {
                println!("{round},{d}");
            }
            println!(
                "last-10 mean accuracy: a {:.4}, b {:.4}, b - a {:+.4} ({})",
                cmp.last10_a,
                cmp.last10_b,
                cmp.last10_delta,
                cmp.verdict()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::CheckGrads { seed } => {
            let results = check_grads(seed)?;
            for r in &results {
                println!(
                    "{} {:<32} {:.3e} (< {:.0e})",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.value,
                    r.threshold
                );
            }
            Ok(if results.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}
