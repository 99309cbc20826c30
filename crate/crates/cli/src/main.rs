//! `poquim`: fit, test, simulate and check non-Gaussian mixed linear models
//! from JSON run files.

mod commands;
mod config;
mod data;
mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Loaded;
use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "poquim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit by quasi-REML or quasi-ML and report POQUIM and the sandwich ACM.
    Fit(RunArgs),
    /// Robust dispersion test of a linear hypothesis on the variance components.
    Test(RunArgs),
    /// Monte Carlo size and power study over a grid of scenarios.
    Simulate(RunArgs),
    /// Monte Carlo mean of POQUIM against the analytic quasi-information.
    OracleCheck(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON run file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the run file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replicate loops.
    #[arg(long)]
    threads: Option<usize>,
    /// JSON report path; the TSV table goes beside it with a `.tsv` extension.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    let (command, args) = match cli.command {
        Command::Fit(a) => (commands::fit as fn(&Loaded, u64) -> Result<commands::Output>, a),
        Command::Test(a) => (commands::test as _, a),
        Command::Simulate(a) => (commands::simulate as _, a),
        Command::OracleCheck(a) => (commands::oracle_check as _, a),
    };
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // fails only if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut loaded = Loaded::read(&args.config)?;
    let seed = args.seed.or(loaded.config.seed).unwrap_or(0);
    loaded.config.seed = Some(seed);
    let out = args
        .out
        .or_else(|| loaded.config.output.as_ref().map(|o| loaded.resolve(&o.path)));
    let output = command(&loaded, seed)?;
    match out {
        Some(json) => {
            let tsv = json.with_extension("tsv");
            if tsv == json {
                return Err(CliError::Usage(format!("{}: the JSON report needs a non-.tsv name", json.display())));
            }
            write(&json, &output.json)?;
            write(&tsv, &output.tsv)
        }
        None => {
            print!("{}", output.json);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
