use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedmaba::runner::{self, ExperimentConfig};
use fedmaba::theory;

#[derive(Parser)]
#[command(name = "fedmaba", version, about = "Federated fair-aggregation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the (strategy x seed) grid described by a config file.
    Run {
        config: PathBuf,
        /// Overrides as `--section.key=value`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Write long-format plot data for a run directory.
    PlotData { run_dir: PathBuf },
    /// Run the oracle and estimator checks.
    Verify {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, overrides } => {
            let config = match ExperimentConfig::load(&config, &overrides) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            match runner::run_experiment(&config) {
                Ok(summary) => {
                    for cell in &summary.cells {
                        let status = cell.error.as_deref().unwrap_or("ok");
                        let acc = cell
                            .last_eval()
                            .and_then(|r| r.eval.as_ref())
                            .map(|e| format!("acc {:.4} var {:.2}", e.global_accuracy, e.fairness_variance))
                            .unwrap_or_default();
                        println!("{:<24} {status} {acc}", runner::cell_name(cell.strategy, cell.seed));
                    }
                    println!("results in {}", summary.output_dir.display());
                    if summary.all_ok() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(2)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::PlotData { run_dir } => match runner::emit_plot_data(&run_dir) {
            Ok(path) => {
                println!("{}", path.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
        Command::Verify { seed } => {
            let outcomes = theory::verify_suite(seed);
            for o in &outcomes {
                println!("[{}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            if outcomes.iter().all(|o| o.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}
