//! `chargenoise` command-line front end. One JSON config drives every
//! subcommand; results go to CSV/JSON files in the output directory together
//! with a run manifest.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::{RunConfig, Threads};
use output::{sha256_hex, Manifest, OutputDir, Versions};

#[derive(Debug)]
pub enum CliError {
    /// Bad input: exit status 2.
    Validation(String),
    /// The simulation or a fit broke down: exit status 3.
    Numerical(String),
    /// Could not write results: exit status 1.
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<chargenoise::Error> for CliError {
    fn from(e: chargenoise::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(name = "chargenoise", version, about = "Spin-qubit charge-noise simulation and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "chargenoise-out")]
    out: PathBuf,
    /// Replaces the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides the config.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Ramsey fringe and T2* fit.
    Ramsey,
    /// Hahn/CPMG decay curves and T2 scaling with n_π.
    Cpmg,
    /// Noise spectrum reconstructed from CPMG decays.
    Spectrum,
    /// Krotov optimization of a gate under the quantum bath.
    Krotov,
    /// Process tomography error budgets and the non-Markovianity probe.
    Tomo,
    /// CPMG filter functions for Gaussian and optimized π pulses.
    Filter,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Ramsey => "ramsey",
            Command::Cpmg => "cpmg",
            Command::Spectrum => "spectrum",
            Command::Krotov => "krotov",
            Command::Tomo => "tomo",
            Command::Filter => "filter",
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let started = Instant::now();
    let path = cli.config.as_ref().ok_or_else(|| CliError::Validation("--config is required".into()))?;
    let bytes = std::fs::read(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Validation(format!("config is not UTF-8: {e}")))?;
    let mut config = RunConfig::parse(text)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(n) = cli.threads {
        config.threads = Threads::Count(n);
    }
    config.validate()?;
    let threads = match config.threads {
        Threads::Auto => 0,
        Threads::Count(n) => n,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Io(format!("thread pool: {e}")))?;

    let mut out = OutputDir::create(&cli.out)?;
    pool.install(|| match cli.command {
        Command::Ramsey => run::ramsey(&config, &mut out),
        Command::Cpmg => run::cpmg(&config, &mut out),
        Command::Spectrum => run::spectrum(&config, &mut out),
        Command::Krotov => run::krotov(&config, &mut out),
        Command::Tomo => run::tomo(&config, &mut out),
        Command::Filter => run::filter(&config, &mut out),
    })?;

    let manifest = Manifest {
        subcommand: cli.command.name().to_string(),
        config_path: path.display().to_string(),
        config_sha256: sha256_hex(&bytes),
        seed: config.seed,
        seed_overridden: cli.seed.is_some(),
        threads: pool.current_num_threads(),
        versions: Versions::current(),
        wall_time_s: started.elapsed().as_secs_f64(),
        outputs: out.written().to_vec(),
    };
    out.json("manifest.json", &manifest)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("chargenoise {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}
