use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use minirl_core::experiment::{compare_runs, export_csv, oracle_suite, run_experiment, ExperimentConfig};
use minirl_core::Error;

/// Reward-based post-training experiments on tiny policies.
#[derive(Parser)]
#[command(name = "minirl", version)]
struct Cli {
    /// Print the result as JSON instead of a text table.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train according to an INI experiment config.
    Run { config: PathBuf },
    /// Smooth and summarize one metric across runs.
    Compare {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long, default_value = "train_acc")]
        field: String,
        #[arg(long, default_value_t = 20)]
        window: usize,
    },
    /// Convert a metrics JSONL file to CSV.
    Export { metrics: PathBuf, csv: PathBuf },
    /// Gradient and estimator-bias audits for a config's task and policy.
    OracleCheck { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MINIRL_LOG", "info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(Error::Config(violations)) => {
            eprintln!("invalid configuration:");
            for v in violations {
                eprintln!("  {}: {}", v.field, v.message);
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> minirl_core::Result<ExitCode> {
    match &cli.command {
        Command::Run { config } => {
            let out = run_experiment(config)?;
            println!(
                "{} iterations written to {} (final checkpoint {})",
                out.iterations,
                out.output_dir.display(),
                out.final_checkpoint.display()
            );
        }
        Command::Compare { paths, field, window } => {
            let c = compare_runs(paths, field, *window)?;
            if cli.json {
                println!("{}", c.to_json());
            } else {
                print!("{c}");
            }
        }
        Command::Export { metrics, csv } => {
            let rows = export_csv(metrics, csv)?;
            println!("{rows} rows written to {}", csv.display());
        }
        Command::OracleCheck { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let report = oracle_suite(&cfg)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{report}");
            }
            if !report.pass {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
