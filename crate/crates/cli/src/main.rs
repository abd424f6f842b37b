use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kvguard::harness::{self, Experiment, ExperimentConfig, HarnessError};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ASSERTION: u8 = 3;

#[derive(Parser)]
#[command(
    name = "kvguard",
    version,
    about = "Bit-flip experiments on a simulated prefix-cached KV store"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corruption metrics for every bit position and batch size.
    ScanBits(Args),
    /// Inject into one prefix group and check that a second group is untouched.
    Selective(Args),
    /// Cumulative damage over sequential requests after one injection.
    Persistence(Args),
    /// Replays, exhaustive sweep and control arm with checksums on.
    Detect(Args),
    /// Throughput with checksums on vs off.
    Overhead(Args),
    /// Injection-free trials that must match their baselines.
    NoiseFloor(Args),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(clap::Args)]
struct Args {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `integrity.enabled`.
    #[arg(long, value_enum)]
    integrity: Option<Switch>,
    /// Overrides `integrity.ttl`; hits before a block is recomputed.
    #[arg(long)]
    ttl: Option<u64>,
}

impl Command {
    fn split(self) -> (Experiment, Args) {
        match self {
            Command::ScanBits(a) => (Experiment::ScanBits, a),
            Command::Selective(a) => (Experiment::Selective, a),
            Command::Persistence(a) => (Experiment::Persistence, a),
            Command::Detect(a) => (Experiment::Detect, a),
            Command::Overhead(a) => (Experiment::Overhead, a),
            Command::NoiseFloor(a) => (Experiment::NoiseFloor, a),
        }
    }
}

fn run(experiment: Experiment, args: &Args) -> Result<harness::Report, HarnessError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(i) = args.integrity {
        cfg.integrity.enabled = matches!(i, Switch::On);
    }
    if args.ttl.is_some() {
        cfg.integrity.ttl = args.ttl;
    }
    let resolved = cfg.resolve(experiment)?;
    harness::execute(&resolved, &args.out)
}

fn main() -> ExitCode {
    let (experiment, args) = Cli::parse().command.split();
    match run(experiment, &args) {
        Ok(report) if report.failures.is_empty() => {
            eprintln!("{experiment}: ok, results in {}", args.out.display());
            ExitCode::SUCCESS
        }
        Ok(report) => {
            for f in &report.failures {
                eprintln!("{experiment}: assertion failed: {f}");
            }
            ExitCode::from(EXIT_ASSERTION)
        }
        Err(e @ HarnessError::Config(_)) => {
            eprintln!("kvguard: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("kvguard: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
