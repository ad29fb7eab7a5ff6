//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! error (including a failed oracle check).

use crate::check::{oracle_check, OracleCheckConfig};
use crate::config::{load_config, ExperimentConfig};
use crate::experiment::{self, run_experiment};
use crate::io::{self, Summary};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lendmatch", version, about = "Borrower-lender matching with learned lender preferences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a market instance and write it as JSON.
    Generate {
        /// Experiment config supplying k, n and the amount ranges.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Instance seed (defaults to the one derived from the config seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured experiment, writing trace.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Play every run on this instance instead of a generated one.
        #[arg(long)]
        instance: Option<PathBuf>,
        /// Runs executed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare the exact solver with exhaustive enumeration.
    OracleCheck {
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// One or more lender counts, cycled over the trials.
        #[arg(long, value_delimiter = ',', default_values_t = [4, 5, 6])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate existing trace CSVs into a summary.
    Summarize {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Write the summary here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first) and runs the command.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            EXIT_RUNTIME
        }
    }
}

fn execute(command: Command) -> Result<i32, String> {
    match command {
        Command::Generate { config, seed, out } => {
            let cfg = match config {
                Some(path) => load_config(&path).map_err(|e| e.to_string())?,
                None => ExperimentConfig::default(),
            };
            let seed = seed.unwrap_or_else(|| experiment::derive_seeds(cfg.seed, 1, false)[0].instance);
            let inst = experiment::instance_for(&cfg, seed).map_err(|e| e.to_string())?;
            io::write_instance(&inst, &out).map_err(|e| e.to_string())?;
            println!("wrote {} ({})", out.display(), inst.fingerprint());
            Ok(EXIT_OK)
        }
        Command::Run { config, out_dir, instance, jobs } => {
            let mut cfg = load_config(&config).map_err(|e| e.to_string())?;
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            let inst = instance.map(|p| io::read_instance(&p)).transpose().map_err(|e| e.to_string())?;
            let out = run_experiment(&cfg, inst, jobs, |_, _| {}).map_err(|e| e.to_string())?;
            println!("wrote {} and {}", out.trace_path.display(), out.summary_path.display());
            Ok(EXIT_OK)
        }
        Command::OracleCheck { k, n, trials, seed } => {
            let cfg = OracleCheckConfig { num_borrowers: k, num_lenders: n, trials, seed, ..Default::default() };
            let report = oracle_check(&cfg).map_err(|e| e.to_string())?;
            println!("{}/{} matched oracle", report.matched, report.trials);
            println!(
                "{}/{} stable when a stable assignment exists",
                report.stable_found, report.stable_exists
            );
            for f in &report.failures {
                eprintln!("{f}");
            }
            Ok(if report.passed() { EXIT_OK } else { EXIT_RUNTIME })
        }
        Command::Summarize { csv, out } => {
            let aggregate = io::aggregate_csv(&csv).map_err(|e| e.to_string())?;
            let summary = Summary::new(&aggregate, None, Vec::new(), false);
            match out {
                Some(path) => io::write_summary_json(&summary, &path).map_err(|e| e.to_string())?,
                None => println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| e.to_string())?),
            }
            Ok(EXIT_OK)
        }
    }
}
