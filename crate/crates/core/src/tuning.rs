//! Closed-loop write-verify tuning.
//!
//! The controller alternates an averaged read with a single tune pulse. The
//! read decides the direction: above target means program (lower the
//! current), below means erase. Consecutive pulses in one direction climb
//! that direction's amplitude ramp by one step. When the direction flips,
//! the new direction resumes `backoff_steps` below the amplitude it last
//! used. The default backoff of four steps is likely suboptimal; it is a
//! plain configuration knob.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::{ArrayState, BiasProtocol, CellAddr, Operation};
use crate::device::current_range;
use crate::error::{Result, SimError};

/// Tuning targets outside this window are rejected up front.
pub const MIN_TARGET_A: f64 = 0.5e-9;
pub const MAX_TARGET_A: f64 = 2e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSchedule {
    pub start_amplitude: f64,
    pub step: f64,
    pub max_amplitude: f64,
    pub pulse_duration: f64,
}

impl RampSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.start_amplitude.is_finite()
            && self.max_amplitude.is_finite()
            && self.start_amplitude <= self.max_amplitude
            && self.step > 0.0
            && self.pulse_duration > 0.0;
        if !ok {
            return Err(SimError::InvalidParams(format!(
                "bad ramp schedule {self:?}"
            )));
        }
        Ok(())
    }

    /// Amplitude at ramp index `idx`, computed from the start so repeated
    /// steps do not accumulate rounding.
    pub fn amplitude(&self, idx: usize) -> f64 {
        (self.start_amplitude + idx as f64 * self.step).min(self.max_amplitude)
    }

    /// First index whose amplitude is the cap.
    pub fn max_index(&self) -> usize {
        ((self.max_amplitude - self.start_amplitude) / self.step - 1e-9)
            .ceil()
            .max(0.0) as usize
    }

    pub fn program_default() -> Self {
        RampSchedule {
            start_amplitude: 4.5,
            step: 0.05,
            max_amplitude: 8.0,
            pulse_duration: 5e-6,
        }
    }

    pub fn erase_default() -> Self {
        RampSchedule {
            start_amplitude: 5.0,
            step: 0.05,
            max_amplitude: 8.5,
            pulse_duration: 0.6e-3,
        }
    }
}

/// A fixed single pulse used to reset a cell to one end of its range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResetPulse {
    pub amplitude: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub target: f64,
    pub rel_tolerance: f64,
    pub read_window: f64,
    pub program_ramp: RampSchedule,
    pub erase_ramp: RampSchedule,
    pub max_pulses: usize,
    pub backoff_steps: usize,
    /// Gate pulse with drain and source grounded.
    pub initial_erase: ResetPulse,
    /// Source pulse with the drain grounded and the gate at the program level.
    pub initial_program: ResetPulse,
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            target: 1e-6,
            rel_tolerance: 0.01,
            read_window: 10e-3,
            program_ramp: RampSchedule::program_default(),
            erase_ramp: RampSchedule::erase_default(),
            max_pulses: 1000,
            backoff_steps: 4,
            initial_erase: ResetPulse {
                amplitude: 10.0,
                duration: 10e-3,
            },
            initial_program: ResetPulse {
                amplitude: 9.0,
                duration: 5e-6,
            },
        }
    }
}

impl TuningConfig {
    pub fn with_target(self, target: f64) -> Self {
        TuningConfig { target, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tolerance > 0.0 && self.rel_tolerance < 1.0) {
            return Err(SimError::range(
                "rel_tolerance",
                self.rel_tolerance,
                0.0,
                1.0,
            ));
        }
        if !(MIN_TARGET_A..=MAX_TARGET_A).contains(&self.target) {
            return Err(SimError::range(
                "target",
                self.target,
                MIN_TARGET_A,
                MAX_TARGET_A,
            ));
        }
        if !(self.read_window > 0.0 && self.read_window.is_finite()) {
            return Err(SimError::range(
                "read_window",
                self.read_window,
                0.0,
                f64::INFINITY,
            ));
        }
        if self.max_pulses == 0 {
            return Err(SimError::InvalidParams("max_pulses must be >= 1".into()));
        }
        self.program_ramp.validate()?;
        self.erase_ramp.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Read,
    Program,
    Erase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub kind: EventKind,
    /// Gate voltage for reads, pulsed amplitude for tune pulses.
    pub amplitude: f64,
    pub measured: Option<f64>,
    pub q_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningTrace {
    pub cell: CellAddr,
    pub target: f64,
    pub events: Vec<TraceEvent>,
    pub converged: bool,
    pub pulses_used: usize,
    /// Last averaged read; NaN when the run was rejected before starting.
    pub final_current: f64,
    pub error: Option<String>,
}

/// Flat per-event log record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: usize,
    pub kind: EventKind,
    pub amplitude: f64,
    pub measured: Option<f64>,
    pub q_after: f64,
}

impl TuningTrace {
    pub fn records(&self) -> impl Iterator<Item = TraceRecord> + '_ {
        self.events
            .iter()
            .enumerate()
            .map(|(index, e)| TraceRecord {
                index,
                kind: e.kind,
                amplitude: e.amplitude,
                measured: e.measured,
                q_after: e.q_after,
            })
    }

    /// One JSON record per event, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in self.records() {
            out.push_str(&serde_json::to_string(&rec).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn relative_error(&self) -> f64 {
        (self.final_current - self.target).abs() / self.target
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Program,
    Erase,
}

/// Ramp bookkeeping for one direction.
#[derive(Debug, Clone, Copy)]
struct RampState {
    last_idx: Option<usize>,
    hit_cap: bool,
}

fn target_reachable(
    array: &ArrayState,
    cell: CellAddr,
    protocol: &BiasProtocol,
    target: f64,
) -> Result<()> {
    let (lo, hi) = current_range(&array.cell(cell)?.params, &protocol.read.biases())?;
    if !(target > lo && target < hi) {
        return Err(SimError::range("target current", target, lo, hi));
    }
    Ok(())
}

/// Single-pulse reset toward the erased end: gate pulse, selected drain and
/// source grounded, every other line per the erase map.
pub fn initial_erase(
    array: &mut ArrayState,
    cell: CellAddr,
    protocol: &BiasProtocol,
    config: &TuningConfig,
) -> Result<()> {
    let mut p = *protocol;
    p.erase.v_d_sel = 0.0;
    p.erase.v_s_sel = 0.0;
    let pulse = config.initial_erase;
    array.apply_operation(
        Operation::Erase {
            amplitude: pulse.amplitude,
        },
        cell,
        &p,
        pulse.duration,
    )?;
    Ok(())
}

/// Single-pulse reset toward the programmed end: source pulse, selected
/// drain grounded, gate at the program level.
pub fn initial_program(
    array: &mut ArrayState,
    cell: CellAddr,
    protocol: &BiasProtocol,
    config: &TuningConfig,
) -> Result<()> {
    let mut p = *protocol;
    p.program.v_d_sel = 0.0;
    let pulse = config.initial_program;
    array.apply_operation(
        Operation::Program {
            amplitude: pulse.amplitude,
        },
        cell,
        &p,
        pulse.duration,
    )?;
    Ok(())
}

/// Erase every listed cell, then program every listed cell.
///
/// A full-range reset pulse on one cell also erases cells sharing its gate
/// line, so resets are batched ahead of tuning rather than interleaved.
pub fn reset_cells(
    array: &mut ArrayState,
    cells: &[CellAddr],
    protocol: &BiasProtocol,
    config: &TuningConfig,
) -> Result<()> {
    for &c in cells {
        initial_erase(array, c, protocol, config)?;
    }
    for &c in cells {
        initial_program(array, c, protocol, config)?;
    }
    Ok(())
}

/// Tune one cell to `config.target`.
///
/// Non-convergence is reported in the trace. An unreachable target or an
/// invalid configuration is an error before any pulse is applied.
pub fn tune_cell<R: Rng + ?Sized>(
    array: &mut ArrayState,
    cell: CellAddr,
    protocol: &BiasProtocol,
    config: &TuningConfig,
    rng: &mut R,
) -> Result<TuningTrace> {
    config.validate()?;
    array.topology.check(cell)?;
    target_reachable(array, cell, protocol, config.target)?;

    let target = config.target;
    let read_gate = protocol.read.v_g;
    let mut events = Vec::new();
    let mut program = RampState {
        last_idx: None,
        hit_cap: false,
    };
    let mut erase = RampState {
        last_idx: None,
        hit_cap: false,
    };
    let mut last_dir: Option<Direction> = None;
    let mut pulses_used = 0;

    loop {
        let measured = array.read_cell(cell, protocol, config.read_window, rng)?;
        events.push(TraceEvent {
            kind: EventKind::Read,
            amplitude: read_gate,
            measured: Some(measured),
            q_after: array.cell(cell)?.q,
        });
        if (measured - target).abs() / target <= config.rel_tolerance {
            return Ok(finish(cell, target, events, true, pulses_used, measured));
        }
        if pulses_used >= config.max_pulses || (program.hit_cap && erase.hit_cap) {
            return Ok(finish(cell, target, events, false, pulses_used, measured));
        }

        let dir = if measured > target {
            Direction::Program
        } else {
            Direction::Erase
        };
        let (ramp, schedule) = match dir {
            Direction::Program => (&mut program, &config.program_ramp),
            Direction::Erase => (&mut erase, &config.erase_ramp),
        };
        let idx = match (last_dir, ramp.last_idx) {
            (Some(d), Some(last)) if d == dir => (last + 1).min(schedule.max_index()),
            (_, Some(last)) => last.saturating_sub(config.backoff_steps),
            (_, None) => 0,
        };
        ramp.last_idx = Some(idx);
        ramp.hit_cap |= idx == schedule.max_index();
        let amplitude = schedule.amplitude(idx);
        let (op, kind) = match dir {
            Direction::Program => (Operation::Program { amplitude }, EventKind::Program),
            Direction::Erase => (Operation::Erase { amplitude }, EventKind::Erase),
        };
        array.apply_operation(op, cell, protocol, schedule.pulse_duration)?;
        pulses_used += 1;
        last_dir = Some(dir);
        events.push(TraceEvent {
            kind,
            amplitude,
            measured: None,
            q_after: array.cell(cell)?.q,
        });
    }
}

fn finish(
    cell: CellAddr,
    target: f64,
    events: Vec<TraceEvent>,
    converged: bool,
    pulses_used: usize,
    final_current: f64,
) -> TuningTrace {
    TuningTrace {
        cell,
        target,
        events,
        converged,
        pulses_used,
        final_current,
        error: None,
    }
}

/// Drift of previously tuned cells over a tuning sequence, from noise-free
/// re-reads. Each cell's reference is its current right after its own most
/// recent tuning.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DisturbReport {
    /// Largest relative drift seen on any previously tuned cell.
    pub max_drift: f64,
    pub worst_cell: Option<CellAddr>,
    /// Largest drift among previously tuned cells after each step.
    pub step_max_drift: Vec<f64>,
    /// Noise-free current of the cell tuned in each step, right after it.
    pub step_current: Vec<f64>,
    /// Drift of every tuned cell at the end versus its reference.
    pub final_drift: Vec<(CellAddr, f64)>,
    /// Largest drift of cells never tuned, first versus last read.
    pub untouched_max_drift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutcome {
    pub traces: Vec<TuningTrace>,
    pub disturb: DisturbReport,
}

/// Tune cells one after another, re-reading all previously tuned cells after
/// each tuning.
pub fn tune_sequence<R: Rng + ?Sized>(
    array: &mut ArrayState,
    plan: &[(CellAddr, f64)],
    protocol: &BiasProtocol,
    config: &TuningConfig,
    rng: &mut R,
) -> Result<SequenceOutcome> {
    for (cell, target) in plan {
        array.topology.check(*cell)?;
        config.with_target(*target).validate()?;
    }
    let planned: Vec<CellAddr> = plan.iter().map(|(c, _)| *c).collect();
    let untouched: Vec<(CellAddr, f64)> = array
        .topology
        .cells()
        .filter(|c| !planned.contains(c))
        .map(|c| Ok((c, array.read_cell_exact(c, protocol)?)))
        .collect::<Result<_>>()?;

    let mut reference: BTreeMap<CellAddr, f64> = BTreeMap::new();
    let mut report = DisturbReport::default();
    let mut traces = Vec::with_capacity(plan.len());

    for &(cell, target) in plan {
        let cfg = config.with_target(target);
        let trace = match tune_cell(array, cell, protocol, &cfg, rng) {
            Ok(t) => t,
            Err(e @ SimError::OutOfRange { .. }) => TuningTrace {
                cell,
                target,
                events: Vec::new(),
                converged: false,
                pulses_used: 0,
                final_current: f64::NAN,
                error: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        };
        traces.push(trace);

        let mut step_max = 0.0f64;
        for (&prev, &i_ref) in reference.iter().filter(|(c, _)| **c != cell) {
            let drift = (array.read_cell_exact(prev, protocol)? - i_ref).abs() / i_ref;
            if drift > step_max {
                step_max = drift;
            }
            if drift > report.max_drift {
                report.max_drift = drift;
                report.worst_cell = Some(prev);
            }
        }
        report.step_max_drift.push(step_max);
        let now = array.read_cell_exact(cell, protocol)?;
        report.step_current.push(now);
        reference.insert(cell, now);
    }

    for (&c, &i_ref) in &reference {
        let drift = (array.read_cell_exact(c, protocol)? - i_ref).abs() / i_ref;
        report.final_drift.push((c, drift));
    }
    for (c, i0) in untouched {
        let drift = (array.read_cell_exact(c, protocol)? - i0).abs() / i0;
        report.untouched_max_drift = report.untouched_max_drift.max(drift);
    }
    Ok(SequenceOutcome {
        traces,
        disturb: report,
    })
}
