//! Command-line harness: validates configs, lists built-in families, and
//! runs studies with fixed exit codes (0 all checks pass, 1 invariant
//! failure or runtime error, 2 config/schema violation, 3 node cap
//! exceeded).

use bsdelab::error::Error;
use bsdelab::harness::{families_text, run_study, ExperimentConfig};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "bsdelab", version, about = "Scenario-tree BSDE laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the study described by a JSON config and write CSV + summary.
    Run {
        config: PathBuf,
        /// Output directory for tables and summary.json (default: the
        /// config's `output` field, then `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the node-count cap.
        #[arg(long)]
        cap: Option<u64>,
        /// Worker threads for per-level parallelism.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the catalog of built-in kernel/driver/lambda/claim families.
    Families,
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_json_str(&text)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig { .. } | Error::BetaOutOfRange(_) => 2,
        Error::NodeCapExceeded { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Families => {
            print!("{}", families_text());
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match load_config(&config).and_then(|c| {
            c.validate()?;
            Ok(c)
        }) {
            Ok(c) => {
                println!("ok: {} study config is valid", c.study.name());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("config error: {e}");
                ExitCode::from(exit_code_for(&e))
            }
        },
        Command::Run {
            config,
            out,
            cap,
            threads,
        } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(exit_code_for(&e));
                }
            };
            let out = out
                .or_else(|| cfg.output.clone().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out"));
            match run_study(&cfg, cap, threads) {
                Ok(bundle) => {
                    match bundle.write_to(&out) {
                        Ok(paths) => {
                            for p in paths {
                                println!("wrote {}", p.display());
                            }
                        }
                        Err(e) => {
                            eprintln!("write error: {e}");
                            return ExitCode::from(1);
                        }
                    }
                    for check in &bundle.checks {
                        println!(
                            "check {} {}: {}",
                            if check.passed { "PASS" } else { "FAIL" },
                            check.name,
                            check.detail
                        );
                    }
                    if let Some(first) = bundle.first_failure() {
                        eprintln!("invariant failure: {}", first.name);
                        ExitCode::from(1)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => {
                    eprintln!("run error: {e}");
                    ExitCode::from(exit_code_for(&e))
                }
            }
        }
    }
}
