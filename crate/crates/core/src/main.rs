use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedqvr::alloc::{solve_alloc, AllocProblem};
use fedqvr::harness::{self, parse_config, SweepConfig};
use fedqvr::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fedqvr",
    version,
    about = "Quantized variance-reduced federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Metrics CSV path (overrides the config's output path).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a grid of experiments; one CSV per point plus index.json.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle checks; nonzero exit on any failure.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Solve one allocation problem given as JSON; prints the solution.
    Alloc {
        #[arg(long)]
        problem: PathBuf,
    },
}

fn read(path: &PathBuf) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.outputs.metrics_csv = Some(o);
            }
            let rows = harness::run_experiment(&cfg)?;
            if cfg.outputs.metrics_csv.is_none() {
                print!("{}", harness::metrics_csv(&rows, cfg.outputs.timing));
            }
            Ok(true)
        }
        Command::Sweep { config, out } => {
            let sweep: SweepConfig = serde_json::from_str(&read(&config)?)?;
            let results = harness::sweep(&sweep, &out)?;
            eprintln!("{} runs written to {}", results.len(), out.display());
            Ok(true)
        }
        Command::Verify { seed } => {
            let checks = harness::verify(seed);
            for c in &checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            Ok(checks.iter().all(|c| c.passed))
        }
        Command::Alloc { problem } => {
            let p: AllocProblem = serde_json::from_str(&read(&problem)?)?;
            let sol = solve_alloc(&p)?;
            println!("{}", serde_json::to_string_pretty(&sol)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
