use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use msplice::cli::{self, RunOptions};

#[derive(Parser)]
#[command(name = "msplice", version, about = "Killed and concatenated Markov processes: build the constructions and verify their laws")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment configuration and write report.json, CSV tables,
    /// and a pass/fail manifest.
    Run {
        /// Path to a JSON experiment configuration (schema version "1").
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: msplice-out/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for replications; never changes results.
        /// Defaults to $MSPLICE_JOBS, then 1.
        #[arg(long)]
        jobs: Option<usize>,
        /// Replace the configured master seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// List the bundled demo configurations.
    ListDemos,
}

fn default_jobs() -> usize {
    std::env::var("MSPLICE_JOBS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListDemos => {
            for demo in cli::demos() {
                println!("{:<18} {}", demo.name, demo.summary);
            }
            println!("\nconfigs ship under crates/core/demos/; run one with:");
            println!("  msplice run --config crates/core/demos/<name>.json");
            ExitCode::SUCCESS
        }
        Command::Run {
            config,
            out,
            jobs,
            seed_override,
        } => {
            let opts = RunOptions {
                out_dir: out,
                jobs: jobs.unwrap_or_else(default_jobs),
                seed_override,
            };
            match cli::run_file(&config, &opts) {
                Ok(summary) => {
                    for check in &summary.checks {
                        println!(
                            "{} {}",
                            if check.pass { "pass" } else { "FAIL" },
                            check.name
                        );
                    }
                    println!(
                        "{} checks, artifacts in {}",
                        summary.checks.len(),
                        summary.out_dir.display()
                    );
                    if summary.pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::FAILURE
                    }
                }
                Err(err) => {
                    eprintln!("{err}");
                    ExitCode::from(err.exit_code() as u8)
                }
            }
        }
    }
}
