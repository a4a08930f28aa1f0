//! Experiment configuration, orchestration and output.
//!
//! Each experiment has a function returning structured results and a
//! `cmd_*` wrapper that writes tables into an output directory and
//! evaluates the experiment's acceptance bands.

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::error::SimError;

pub mod config;
pub mod experiments;
pub mod output;

pub use config::ExperimentConfig;
pub use experiments::{cmd_disturb, cmd_dynamics, cmd_montecarlo, cmd_sweep, cmd_tune, cmd_vmm};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("simulation error: {0}")]
    Sim(#[from] SimError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Sweep,
    Dynamics,
    Tune,
    Disturb,
    Vmm,
    MonteCarlo,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Sweep,
        Experiment::Dynamics,
        Experiment::Tune,
        Experiment::Disturb,
        Experiment::Vmm,
        Experiment::MonteCarlo,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Sweep => "sweep",
            Experiment::Dynamics => "dynamics",
            Experiment::Tune => "tune",
            Experiment::Disturb => "disturb",
            Experiment::Vmm => "vmm",
            Experiment::MonteCarlo => "montecarlo",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One acceptance band evaluated on an experiment's results.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn run(
    experiment: Experiment,
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<Report, HarnessError> {
    match experiment {
        Experiment::Sweep => cmd_sweep(config, out_dir),
        Experiment::Dynamics => cmd_dynamics(config, out_dir),
        Experiment::Tune => cmd_tune(config, out_dir),
        Experiment::Disturb => cmd_disturb(config, out_dir),
        Experiment::Vmm => cmd_vmm(config, out_dir),
        Experiment::MonteCarlo => cmd_montecarlo(config, out_dir),
    }
}
