use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fg_array_sim::harness::{self, Experiment, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(
    name = "fg-array-sim",
    version,
    about = "Floating-gate array tuning and VMM simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: config `out_dir`, else `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Readout characteristics versus gate and drain voltage.
    Sweep(Common),
    /// Current versus pulse count for program and erase trains.
    Dynamics(Common),
    /// Sequential write-verify tuning.
    Tune(Common),
    /// Half-select disturb under both routings.
    Disturb(Common),
    /// Vector-by-matrix multiplier transfer and linearity.
    Vmm(Common),
    /// Tuning success under device variability.
    Montecarlo(Common),
}

fn execute(experiment: Experiment, args: &Common) -> Result<bool, HarnessError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let report = harness::run(experiment, &cfg, &out)?;
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    for c in &report.checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        if c.detail.is_empty() {
            println!("{tag} {}", c.name);
        } else {
            println!("{tag} {} ({})", c.name, c.detail);
        }
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, args) = match &cli.command {
        Command::Sweep(a) => (Experiment::Sweep, a),
        Command::Dynamics(a) => (Experiment::Dynamics, a),
        Command::Tune(a) => (Experiment::Tune, a),
        Command::Disturb(a) => (Experiment::Disturb, a),
        Command::Vmm(a) => (Experiment::Vmm, a),
        Command::Montecarlo(a) => (Experiment::MonteCarlo, a),
    };
    match execute(experiment, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("fg-array-sim {experiment}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
