//! Experiment configuration.
//!
//! Every table rejects unknown keys and fills missing keys from defaults.
//! Ramp and reset-pulse tables are the exception: when given, they must be
//! complete, because program and erase ramps have different defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::array::{ArrayTopology, BiasProtocol, CellAddr};
use crate::device::DeviceParams;
use crate::tuning::TuningConfig;

use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required by `tune`, `vmm` and `montecarlo`.
    pub seed: Option<u64>,
    /// Output directory; the `--out` flag wins over this.
    pub out_dir: Option<PathBuf>,
    pub device: DeviceParams,
    pub topology: ArrayTopology,
    pub protocol: BiasProtocol,
    pub tuning: TuningConfig,
    pub sweep: SweepConfig,
    pub dynamics: DynamicsConfig,
    pub tune: TuneConfig,
    pub disturb: DisturbConfig,
    pub vmm: VmmConfig,
    pub montecarlo: MonteCarloConfig,
}

/// A cell state named by its end of the range or by its read-point current.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateSpec {
    Named(NamedState),
    Current(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedState {
    Erased,
    Programmed,
}

impl std::fmt::Display for StateSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateSpec::Named(NamedState::Erased) => f.write_str("erased"),
            StateSpec::Named(NamedState::Programmed) => f.write_str("programmed"),
            StateSpec::Current(i) => write!(f, "{i:e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub states: Vec<StateSpec>,
    pub vg_start: f64,
    pub vg_stop: f64,
    pub vg_step: f64,
    /// Drain voltage held during the gate sweep.
    pub vg_sweep_vd: f64,
    pub vd_start: f64,
    pub vd_stop: f64,
    pub vd_step: f64,
    /// Gate voltage held during the drain sweep.
    pub vd_sweep_vg: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            states: vec![
                StateSpec::Named(NamedState::Erased),
                StateSpec::Current(1e-6),
                StateSpec::Current(1e-7),
                StateSpec::Current(1e-8),
                StateSpec::Current(1e-9),
                StateSpec::Named(NamedState::Programmed),
            ],
            vg_start: 0.0,
            vg_stop: 4.0,
            vg_step: 0.05,
            vg_sweep_vd: 1.0,
            vd_start: 0.0,
            vd_stop: 2.5,
            vd_step: 0.05,
            vd_sweep_vg: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    /// Source amplitudes; each train starts from the erased end.
    pub program_amplitudes: Vec<f64>,
    pub program_durations: Vec<f64>,
    /// Gate amplitudes; each train starts from the programmed end.
    pub erase_amplitudes: Vec<f64>,
    pub erase_durations: Vec<f64>,
    pub pulses: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            program_amplitudes: vec![6.5, 7.0, 7.5],
            program_durations: vec![5e-6, 20e-6],
            erase_amplitudes: vec![6.0, 7.0, 8.0],
            erase_durations: vec![0.6e-3, 2.4e-3],
            pulses: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    /// Each target is applied to every cell before moving to the next.
    pub targets: Vec<f64>,
    /// Cells as `[row, col]`; empty means every cell.
    pub cells: Vec<[usize; 2]>,
    /// Reset every listed cell to the programmed end first.
    pub reset: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            targets: vec![1e-6, 1e-7, 1e-8, 1e-9],
            cells: Vec::new(),
            reset: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbConfig {
    pub selected: [usize; 2],
    /// Every cell starts here.
    pub initial_current: f64,
    /// The selected cell is erased until it reaches this.
    pub goal_current: f64,
    pub inhibit_start: f64,
    pub inhibit_stop: f64,
    pub inhibit_step: f64,
}

impl Default for DisturbConfig {
    fn default() -> Self {
        DisturbConfig {
            selected: [0, 0],
            initial_current: 1e-8,
            goal_current: 1e-6,
            inhibit_start: 0.0,
            inhibit_stop: 3.0,
            inhibit_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VmmConfig {
    /// Each set is an `n_in × n_out` matrix.
    pub weight_sets: Vec<Vec<Vec<f64>>>,
    pub i_ref: f64,
    pub i_floor: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub points: usize,
    /// Independent programming and readout runs averaged for the noisy curve.
    pub noise_seeds: u64,
    pub read_window: f64,
    /// Array cells and peripherals use the nominal parameters, without
    /// per-cell variability.
    pub matched_devices: bool,
}

impl Default for VmmConfig {
    fn default() -> Self {
        VmmConfig {
            weight_sets: vec![vec![vec![0.5]], vec![vec![0.6, -0.4], vec![0.3, -0.5]]],
            i_ref: 1e-6,
            i_floor: 5e-9,
            x_min: 1e-8,
            x_max: 1e-6,
            points: 11,
            noise_seeds: 10,
            read_window: 10e-3,
            matched_devices: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub runs: u64,
    pub sigmas: Vec<f64>,
    pub target: f64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            runs: 30,
            sigmas: vec![0.0, 0.01, 0.03, 0.1],
            target: 1e-6,
        }
    }
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn require_seed(&self) -> Result<u64, HarnessError> {
        self.seed.ok_or_else(|| {
            bad("this experiment is noisy and needs a seed (config `seed` or --seed)")
        })
    }

    pub fn cell_list(&self) -> Vec<CellAddr> {
        if self.tune.cells.is_empty() {
            self.topology.cells().collect()
        } else {
            self.tune
                .cells
                .iter()
                .map(|[r, c]| CellAddr::new(*r, *c))
                .collect()
        }
    }

    /// Every failure, including model-level range errors, is a config error.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.check().map_err(|e| match e {
            HarnessError::Sim(s) => HarnessError::Config(s.to_string()),
            e => e,
        })
    }

    fn check(&self) -> Result<(), HarnessError> {
        self.device.validate()?;
        self.topology.validate()?;
        self.protocol.validate()?;
        self.tuning.validate()?;

        let s = &self.sweep;
        for (name, a, b, step) in [
            ("vg", s.vg_start, s.vg_stop, s.vg_step),
            ("vd", s.vd_start, s.vd_stop, s.vd_step),
        ] {
            if !(step > 0.0 && a <= b) {
                return Err(bad(format!(
                    "sweep {name}: need start <= stop and step > 0"
                )));
            }
        }
        for st in &s.states {
            if let StateSpec::Current(i) = st {
                if !(*i > 0.0) {
                    return Err(bad(format!("sweep state current {i} must be > 0")));
                }
            }
        }

        let d = &self.dynamics;
        if d.program_durations
            .iter()
            .chain(&d.erase_durations)
            .any(|t| !(*t > 0.0))
        {
            return Err(bad("dynamics durations must be > 0"));
        }

        let t = &self.tune;
        for &target in &t.targets {
            self.tuning.with_target(target).validate()?;
        }
        let cells = self.cell_list();
        for c in &cells {
            self.topology.check(*c)?;
        }
        let mut sorted = cells.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != cells.len() {
            return Err(bad("tune cells must be distinct"));
        }

        let ds = &self.disturb;
        self.topology
            .check(CellAddr::new(ds.selected[0], ds.selected[1]))?;
        if !(ds.initial_current > 0.0 && ds.goal_current > ds.initial_current) {
            return Err(bad("disturb: need 0 < initial_current < goal_current"));
        }
        if !(ds.inhibit_step > 0.0 && ds.inhibit_start <= ds.inhibit_stop) {
            return Err(bad(
                "disturb: need inhibit_start <= inhibit_stop and inhibit_step > 0",
            ));
        }

        let v = &self.vmm;
        for set in &v.weight_sets {
            let n_out = set.first().map_or(0, Vec::len);
            if n_out == 0 || set.iter().any(|r| r.len() != n_out) {
                return Err(bad(
                    "vmm weight sets must be non-empty rectangular matrices",
                ));
            }
        }
        if !(v.x_min >= v.i_floor && v.x_min < v.x_max && v.x_max <= v.i_ref) {
            return Err(bad("vmm: need i_floor <= x_min < x_max <= i_ref"));
        }
        if v.points < 10 {
            return Err(bad("vmm: need at least 10 sweep points"));
        }
        if v.noise_seeds == 0 || !(v.read_window > 0.0) {
            return Err(bad("vmm: need noise_seeds >= 1 and read_window > 0"));
        }

        let m = &self.montecarlo;
        if m.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(bad("montecarlo sigmas must be >= 0"));
        }
        self.tuning.with_target(m.target).validate()?;
        Ok(())
    }
}
