mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use commands::{Abort, Verdict};
use config::RunConfig;
use output::OutputDir;

/// Environment variable naming the default output root.
const OUTPUT_ROOT_VAR: &str = "SKT_OUTPUT_ROOT";

const EXIT_USAGE: u8 = 1;
const EXIT_CHECK: u8 = 2;
const EXIT_ABORT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "skt",
    version,
    about = "Stochastic cross-diffusion simulator and checks"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the regularized SPDE and write trajectory, snapshots and summary.
    SimulateSpde(Common),
    /// Run particle replicas and write martingales and covariance summary.
    SimulateParticles(Common),
    /// Deterministic run; exit 2 if the entropy balance is violated.
    VerifyEntropy(Common),
    /// Particle versus analytic covariance; exit 2 if any |z| exceeds the threshold.
    VerifyCovariance(Common),
    /// Detailed balance and population-size conditions; exit 2 if they fail.
    CheckAssumptions(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    config: PathBuf,
    /// Output directory (overrides the config and $SKT_OUTPUT_ROOT).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Seed for every random stream (overrides the config).
    #[arg(short, long)]
    seed: Option<u64>,
}

fn output_dir(common: &Common, config: &RunConfig) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    if let Some(dir) = &config.output.dir {
        return PathBuf::from(dir);
    }
    let stem = common
        .config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let root = std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new("skt-output").to_path_buf());
    root.join(stem)
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.apply_seed(seed);
    }
    if let Some(threads) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("thread pool")?;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let (common, run): (&Common, fn(&RunConfig, &OutputDir) -> Result<Verdict>) = match &cli.command
    {
        Command::SimulateSpde(c) => (c, commands::simulate_spde),
        Command::SimulateParticles(c) => (c, commands::simulate_particles),
        Command::VerifyEntropy(c) => (c, commands::verify_entropy),
        Command::VerifyCovariance(c) => (c, commands::verify_covariance),
        Command::CheckAssumptions(c) => (c, commands::check_assumptions),
    };
    let config = match load(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = OutputDir::create(output_dir(common, &config)).and_then(|out| {
        log::info!("output directory {}", out.path().display());
        run(&config, &out)
    });
    match result {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => ExitCode::from(EXIT_CHECK),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Abort>().is_some() {
                ExitCode::from(EXIT_ABORT)
            } else {
                ExitCode::from(EXIT_USAGE)
            }
        }
    }
}
