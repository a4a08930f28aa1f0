use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::array::{
    ArrayState, ArrayTopology, BiasProtocol, CellAddr, CellClass, OpKind, Operation, RoutingVariant,
};
use crate::device::{draw_cell, state_for_current, CellState, DeviceParams, Pulse, TerminalBiases};
use crate::tuning::{reset_cells, tune_sequence, RampSchedule, SequenceOutcome, TraceRecord};
use crate::vmm::{
    linearity_metric, log_sweep, peripheral, program_weights, vmm_output, vmm_output_noisy,
    VmmInput, VmmProgram,
};

use super::config::{ExperimentConfig, NamedState, StateSpec};
use super::output::{num, write_file, Table};
use super::{Check, HarnessError, Report};

/// Disturb band for non-selected cells under the modified routing.
pub const MODIFIED_DISTURB_LIMIT: f64 = 0.005;
/// Minimum half-select change that makes the original routing unusable.
pub const ORIGINAL_HALF_C_FLOOR: f64 = 0.10;
/// Drift band for previously tuned cells.
pub const TUNE_DRIFT_LIMIT: f64 = 0.01;
pub const VMM_CLEAN_LIMIT: f64 = 0.01;
pub const VMM_NOISY_LIMIT: f64 = 0.02;
pub const MONTECARLO_SUCCESS_FLOOR: f64 = 0.95;

fn inclusive_steps(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| start + k as f64 * step).collect()
}

/// Seeded generator on its own stream, so sub-experiments do not share draws.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn state_from_spec(
    spec: StateSpec,
    params: &DeviceParams,
    protocol: &BiasProtocol,
) -> Result<CellState, HarnessError> {
    Ok(match spec {
        StateSpec::Named(NamedState::Erased) => CellState::erased(*params),
        StateSpec::Named(NamedState::Programmed) => CellState::programmed(*params),
        StateSpec::Current(i) => state_for_current(i, &protocol.read.biases(), params)
            .map_err(|e| HarnessError::Config(format!("sweep state {i:e}: {e}")))?,
    })
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sweep: &'static str,
    pub value: f64,
    pub state: String,
    pub q: f64,
    pub current: f64,
}

pub fn sweep_experiment(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, HarnessError> {
    let s = &cfg.sweep;
    let states = s
        .states
        .iter()
        .map(|spec| {
            Ok((
                spec.to_string(),
                state_from_spec(*spec, &cfg.device, &cfg.protocol)?,
            ))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let mut rows = Vec::new();
    let gate = inclusive_steps(s.vg_start, s.vg_stop, s.vg_step);
    let drain = inclusive_steps(s.vd_start, s.vd_stop, s.vd_step);
    for (name, st) in &states {
        for &v in &gate {
            let b = TerminalBiases::new(v, s.vg_sweep_vd, 0.0)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            rows.push(SweepRow {
                sweep: "vg",
                value: v,
                state: name.clone(),
                q: st.q,
                current: st.read_current(&b)?,
            });
        }
        for &v in &drain {
            let b = TerminalBiases::new(s.vd_sweep_vg, v, 0.0)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            rows.push(SweepRow {
                sweep: "vds",
                value: v,
                state: name.clone(),
                q: st.q,
                current: st.read_current(&b)?,
            });
        }
    }
    Ok(rows)
}

/// Higher charge never reads lower at the same sweep point.
pub fn sweep_curves_ordered(rows: &[SweepRow]) -> bool {
    for a in rows {
        for b in rows {
            if a.sweep == b.sweep && a.value == b.value && a.q < b.q && a.current > b.current {
                return false;
            }
        }
    }
    true
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Report, HarnessError> {
    let rows = sweep_experiment(cfg)?;
    let mut t = Table::new(&["sweep", "value", "state", "current"]);
    for r in &rows {
        t.push(vec![
            r.sweep.into(),
            num(r.value),
            r.state.clone(),
            num(r.current),
        ]);
    }
    let file = write_file(out, "sweep.csv", &t.render(&cfg.hash(), cfg.seed)?)?;
    Ok(Report {
        files: vec![file],
        checks: vec![Check::new(
            "state curves do not cross",
            sweep_curves_ordered(&rows),
            format!("{} rows", rows.len()),
        )],
    })
}

// ---------------------------------------------------------------- dynamics

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsRow {
    pub family: OpKind,
    pub amplitude: f64,
    pub duration: f64,
    pub pulse_index: usize,
    pub current: f64,
}

pub fn dynamics_experiment(cfg: &ExperimentConfig) -> Result<Vec<DynamicsRow>, HarnessError> {
    let d = &cfg.dynamics;
    let read = cfg.protocol.read.biases();
    let p = &cfg.protocol.program;
    let e = &cfg.protocol.erase;
    let mut trains = Vec::new();
    for &amp in &d.program_amplitudes {
        for &dur in &d.program_durations {
            trains.push((
                OpKind::Program,
                amp,
                dur,
                TerminalBiases::new(p.v_g_sel, p.v_d_sel, amp),
            ));
        }
    }
    for &amp in &d.erase_amplitudes {
        for &dur in &d.erase_durations {
            trains.push((
                OpKind::Erase,
                amp,
                dur,
                TerminalBiases::new(amp, e.v_d_sel, e.v_s_sel),
            ));
        }
    }
    let mut rows = Vec::new();
    for (family, amplitude, duration, biases) in trains {
        let biases =
            biases.map_err(|err| HarnessError::Config(format!("dynamics pulse: {err}")))?;
        let pulse = Pulse::new(biases, duration)
            .map_err(|err| HarnessError::Config(format!("dynamics pulse: {err}")))?;
        let mut cell = match family {
            OpKind::Program => CellState::erased(cfg.device),
            _ => CellState::programmed(cfg.device),
        };
        for pulse_index in 0..=d.pulses {
            if pulse_index > 0 {
                cell = cell.pulse_update(&pulse)?.0;
            }
            rows.push(DynamicsRow {
                family,
                amplitude,
                duration,
                pulse_index,
                current: cell.read_current(&read)?,
            });
        }
    }
    Ok(rows)
}

/// Program trains never rise, erase trains never fall, and a stronger
/// pulse (higher amplitude or longer) is never behind a weaker one.
pub fn dynamics_families_ordered(rows: &[DynamicsRow]) -> bool {
    let sign = |f: OpKind| if f == OpKind::Program { -1.0 } else { 1.0 };
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let same_train =
            a.family == b.family && a.amplitude == b.amplitude && a.duration == b.duration;
        if same_train
            && b.pulse_index == a.pulse_index + 1
            && sign(a.family) * (b.current - a.current) < 0.0
        {
            return false;
        }
    }
    for a in rows {
        for b in rows {
            let stronger = (a.amplitude >= b.amplitude && a.duration >= b.duration)
                && (a.amplitude, a.duration) != (b.amplitude, b.duration);
            if a.family == b.family
                && a.pulse_index == b.pulse_index
                && stronger
                && sign(a.family) * (a.current - b.current) < 0.0
            {
                return false;
            }
        }
    }
    true
}

fn family_name(k: OpKind) -> &'static str {
    match k {
        OpKind::Program => "program",
        OpKind::Erase => "erase",
        OpKind::Read => "read",
    }
}

pub fn cmd_dynamics(cfg: &ExperimentConfig, out: &Path) -> Result<Report, HarnessError> {
    let rows = dynamics_experiment(cfg)?;
    let mut t = Table::new(&["family", "amplitude", "duration", "pulse_index", "current"]);
    for r in &rows {
        t.push(vec![
            family_name(r.family).into(),
            num(r.amplitude),
            num(r.duration),
            r.pulse_index.to_string(),
            num(r.current),
        ]);
    }
    let file = write_file(out, "dynamics.csv", &t.render(&cfg.hash(), cfg.seed)?)?;
    Ok(Report {
        files: vec![file],
        checks: vec![Check::new(
            "pulse families ordered",
            dynamics_families_ordered(&rows),
            format!("{} rows", rows.len()),
        )],
    })
}

// ---------------------------------------------------------------- tune

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub plan: Vec<(CellAddr, f64)>,
    pub outcome: SequenceOutcome,
}

impl TuneResult {
    pub fn all_converged(&self) -> bool {
        self.outcome.traces.iter().all(|t| t.converged)
    }

    /// Largest noise-free relative error of a converged step, right after it.
    pub fn max_true_error(&self) -> f64 {
        self.outcome
            .traces
            .iter()
            .zip(&self.outcome.disturb.step_current)
            .filter(|(t, _)| t.converged)
            .map(|(t, i)| (i - t.target).abs() / t.target)
            .fold(0.0, f64::max)
    }
}

/// Draw an array, optionally reset the listed cells, then tune them to each
/// target in turn.
pub fn tune_experiment(cfg: &ExperimentConfig) -> Result<TuneResult, HarnessError> {
    let seed = cfg.require_seed()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut array = ArrayState::draw(cfg.topology, &cfg.device, &mut rng)?;
    let cells = cfg.cell_list();
    if cfg.tune.reset {
        reset_cells(&mut array, &cells, &cfg.protocol, &cfg.tuning)?;
    }
    let plan: Vec<(CellAddr, f64)> = cfg
        .tune
        .targets
        .iter()
        .flat_map(|&t| cells.iter().map(move |&c| (c, t)))
        .collect();
    let outcome = tune_sequence(&mut array, &plan, &cfg.protocol, &cfg.tuning, &mut rng)?;
    Ok(TuneResult { plan, outcome })
}

#[derive(Serialize)]
struct StepRecord {
    step: usize,
    row: usize,
    col: usize,
    target: f64,
    #[serde(flatten)]
    event: TraceRecord,
}

pub fn cmd_tune(cfg: &ExperimentConfig, out: &Path) -> Result<Report, HarnessError> {
    let res = tune_experiment(cfg)?;
    let d = &res.outcome.disturb;
    let mut t = Table::new(&[
        "step",
        "row",
        "col",
        "target",
        "converged",
        "pulses",
        "final_read",
        "true_current",
        "true_rel_error",
        "prev_max_drift",
    ]);
    let mut jsonl = String::new();
    for (step, trace) in res.outcome.traces.iter().enumerate() {
        let truth = d.step_current[step];
        t.push(vec![
            step.to_string(),
            trace.cell.row.to_string(),
            trace.cell.col.to_string(),
            num(trace.target),
            trace.converged.to_string(),
            trace.pulses_used.to_string(),
            num(trace.final_current),
            num(truth),
            num((truth - trace.target).abs() / trace.target),
            num(d.step_max_drift[step]),
        ]);
        for event in trace.records() {
            let rec = StepRecord {
                step,
                row: trace.cell.row,
                col: trace.cell.col,
                target: trace.target,
                event,
            };
            jsonl.push_str(
                &serde_json::to_string(&rec).map_err(|e| HarnessError::Internal(e.to_string()))?,
            );
            jsonl.push('\n');
        }
    }
    let hash = cfg.hash();
    let files = vec![
        write_file(out, "tune_summary.csv", &t.render(&hash, cfg.seed)?)?,
        write_file(out, "tune_traces.jsonl", &jsonl)?,
    ];
    let converged = res.outcome.traces.iter().filter(|t| t.converged).count();
    Ok(Report {
        files,
        checks: vec![
            Check::new(
                "every step converged",
                res.all_converged(),
                format!("{converged}/{}", res.outcome.traces.len()),
            ),
            Check::new(
                "previously tuned cells drift < 1%",
                d.max_drift < TUNE_DRIFT_LIMIT,
                format!("max drift {:.3e}", d.max_drift),
            ),
        ],
    })
}

// ---------------------------------------------------------------- disturb

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedErase {
    pub before: ArrayState,
    pub after: ArrayState,
    pub pulses: usize,
    pub reached: bool,
}

/// Put every cell at `initial` and ramp erase pulses on `selected` until its
/// noise-free current reaches `goal` or `max_pulses` run out.
#[allow(clippy::too_many_arguments)]
pub fn matched_erase(
    topology: ArrayTopology,
    params: &DeviceParams,
    protocol: &BiasProtocol,
    ramp: &RampSchedule,
    selected: CellAddr,
    initial: f64,
    goal: f64,
    max_pulses: usize,
) -> Result<MatchedErase, HarnessError> {
    let start = state_for_current(initial, &protocol.read.biases(), params)?;
    let before = ArrayState::uniform(topology, start)?;
    let mut after = before.clone();
    let mut pulses = 0;
    let mut reached = false;
    while pulses < max_pulses {
        let amplitude = ramp.amplitude(pulses);
        after.apply_operation(
            Operation::Erase { amplitude },
            selected,
            protocol,
            ramp.pulse_duration,
        )?;
        pulses += 1;
        if after.read_cell_exact(selected, protocol)? >= goal {
            reached = true;
            break;
        }
    }
    Ok(MatchedErase {
        before,
        after,
        pulses,
        reached,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbRow {
    pub routing: RoutingVariant,
    pub v_d_inhibit: f64,
    pub cell: CellAddr,
    pub class: CellClass,
    pub i_initial: f64,
    pub i_final: f64,
    pub rel_change: f64,
    pub selected_pulses: usize,
    pub selected_reached: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbResult {
    pub rows: Vec<DisturbRow>,
}

impl DisturbResult {
    pub fn modified_max_nonselected(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.routing == RoutingVariant::Modified && r.class != CellClass::Selected)
            .map(|r| r.rel_change)
            .fold(0.0, f64::max)
    }

    /// Inhibit voltages at which the selected cell reached its goal.
    pub fn admissible_inhibits(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| {
                r.routing == RoutingVariant::Original
                    && r.class == CellClass::Selected
                    && r.selected_reached
            })
            .map(|r| r.v_d_inhibit)
            .collect();
        v.dedup();
        v
    }

    /// Smallest type-C change over the admissible part of the sweep.
    pub fn original_min_half_c(&self) -> f64 {
        let ok = self.admissible_inhibits();
        self.rows
            .iter()
            .filter(|r| {
                r.routing == RoutingVariant::Original
                    && r.class == CellClass::HalfC
                    && ok.contains(&r.v_d_inhibit)
            })
            .map(|r| r.rel_change)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn selected_changed(&self) -> bool {
        self.rows
            .iter()
            .filter(|r| r.class == CellClass::Selected)
            .all(|r| r.rel_change > 0.0)
    }
}

fn disturb_rows(
    routing: RoutingVariant,
    v_d_inhibit: f64,
    selected: CellAddr,
    run: &MatchedErase,
    protocol: &BiasProtocol,
) -> Result<Vec<DisturbRow>, HarnessError> {
    let topo = run.before.topology;
    let mut rows = Vec::new();
    for cell in topo.cells() {
        let i0 = run.before.read_cell_exact(cell, protocol)?;
        let i1 = run.after.read_cell_exact(cell, protocol)?;
        rows.push(DisturbRow {
            routing,
            v_d_inhibit,
            cell,
            class: topo.classify(OpKind::Erase, selected, cell)?,
            i_initial: i0,
            i_final: i1,
            rel_change: (i1 - i0).abs() / i0,
            selected_pulses: run.pulses,
            selected_reached: run.reached,
        });
    }
    Ok(rows)
}

/// The same erase sequence under both routings. The original routing is
/// run once per inhibit voltage on the unselected bit lines, with the
/// selected bit line grounded.
pub fn disturb_experiment(cfg: &ExperimentConfig) -> Result<DisturbResult, HarnessError> {
    let d = &cfg.disturb;
    let selected = CellAddr::new(d.selected[0], d.selected[1]);
    let ramp = &cfg.tuning.erase_ramp;
    let budget = cfg.tuning.max_pulses;
    let mut rows = Vec::new();

    let modified = ArrayTopology {
        routing: RoutingVariant::Modified,
        ..cfg.topology
    };
    let run = matched_erase(
        modified,
        &cfg.device,
        &cfg.protocol,
        ramp,
        selected,
        d.initial_current,
        d.goal_current,
        budget,
    )?;
    rows.extend(disturb_rows(
        RoutingVariant::Modified,
        cfg.protocol.erase.v_d_unsel,
        selected,
        &run,
        &cfg.protocol,
    )?);

    let original = ArrayTopology {
        routing: RoutingVariant::Original,
        ..cfg.topology
    };
    for v in inclusive_steps(d.inhibit_start, d.inhibit_stop, d.inhibit_step) {
        let mut protocol = cfg.protocol;
        protocol.erase.v_d_sel = 0.0;
        protocol.erase.v_d_unsel = v;
        protocol
            .validate()
            .map_err(|e| HarnessError::Config(format!("inhibit {v}: {e}")))?;
        let run = matched_erase(
            original,
            &cfg.device,
            &protocol,
            ramp,
            selected,
            d.initial_current,
            d.goal_current,
            budget,
        )?;
        rows.extend(disturb_rows(
            RoutingVariant::Original,
            v,
            selected,
            &run,
            &protocol,
        )?);
    }
    Ok(DisturbResult { rows })
}

pub fn disturb_checks(res: &DisturbResult) -> Vec<Check> {
    let m = res.modified_max_nonselected();
    let c = res.original_min_half_c();
    let admissible = res.admissible_inhibits();
    vec![
        Check::new(
            "modified: non-selected change < 0.5%",
            m < MODIFIED_DISTURB_LIMIT,
            format!("max {m:.3e}"),
        ),
        Check::new(
            "original: type-C change >= 10% at every admissible inhibit",
            !admissible.is_empty() && c >= ORIGINAL_HALF_C_FLOOR,
            format!("min {c:.3e} over {} inhibit voltages", admissible.len()),
        ),
        Check::new(
            "selected cell changes",
            res.selected_changed(),
            String::new(),
        ),
    ]
}

pub fn cmd_disturb(cfg: &ExperimentConfig, out: &Path) -> Result<Report, HarnessError> {
    let res = disturb_experiment(cfg)?;
    let mut t = Table::new(&[
        "routing",
        "v_d_inhibit",
        "row",
        "col",
        "class",
        "i_initial",
        "i_final",
        "rel_change",
        "selected_pulses",
        "selected_reached",
    ]);
    for r in &res.rows {
        t.push(vec![
            r.routing.to_string(),
            num(r.v_d_inhibit),
            r.cell.row.to_string(),
            r.cell.col.to_string(),
            r.class.to_string(),
            num(r.i_initial),
            num(r.i_final),
            num(r.rel_change),
            r.selected_pulses.to_string(),
            r.selected_reached.to_string(),
        ]);
    }
    let file = write_file(out, "disturb.csv", &t.render(&cfg.hash(), cfg.seed)?)?;
    Ok(Report {
        files: vec![file],
        checks: disturb_checks(&res),
    })
}

// ---------------------------------------------------------------- vmm

#[derive(Debug, Clone, PartialEq)]
pub struct TransferPoint {
    pub x: f64,
    /// Per output, noise-free.
    pub clean: Vec<(f64, f64, f64)>,
    /// Per output, noisy `y` averaged over the runs.
    pub noisy_y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmmSetResult {
    pub weights: Vec<Vec<f64>>,
    /// Programming of the first run.
    pub program: VmmProgram,
    pub points: Vec<TransferPoint>,
    pub clean_metric: Vec<f64>,
    pub noisy_metric: Vec<f64>,
    pub all_converged: bool,
}

struct VmmRun {
    array: ArrayState,
    program: VmmProgram,
    periphs: Vec<CellState>,
}

fn vmm_run(
    cfg: &ExperimentConfig,
    weights: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<VmmRun, HarnessError> {
    let v = &cfg.vmm;
    let params = if v.matched_devices {
        DeviceParams {
            variability_sigma: 0.0,
            ..cfg.device
        }
    } else {
        cfg.device
    };
    let n_in = weights.len();
    let n_out = weights[0].len();
    let topo = ArrayTopology::new((2 * n_in).max(2), (2 * n_out).max(2), cfg.topology.routing)?;
    let mut array = ArrayState::draw(topo, &params, rng)?;
    let program = program_weights(
        &mut array,
        weights,
        v.i_ref,
        v.i_floor,
        &cfg.protocol,
        &cfg.tuning,
        rng,
    )?;
    let periphs = (0..2 * n_in)
        .map(|_| peripheral(&draw_cell(&params, rng).params, v.i_ref, &cfg.protocol))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VmmRun {
        array,
        program,
        periphs,
    })
}

/// Program each weight set, sweep `x⁺` on every input with `x⁻` at the
/// floor, and report noise-free and run-averaged noisy transfer curves.
pub fn vmm_experiment(cfg: &ExperimentConfig) -> Result<Vec<VmmSetResult>, HarnessError> {
    let seed = cfg.require_seed()?;
    let v = &cfg.vmm;
    let xs = log_sweep(v.x_min, v.x_max, v.points);
    let mut results = Vec::new();
    for (set_idx, weights) in v.weight_sets.iter().enumerate() {
        let n_out = weights[0].len();
        let input = |x: f64| VmmInput {
            pairs: vec![(x, v.i_floor); weights.len()],
        };
        let mut noisy_sum = vec![vec![0.0; n_out]; xs.len()];
        let mut first: Option<VmmRun> = None;
        let mut all_converged = true;
        for r in 0..v.noise_seeds {
            let mut rng = stream_rng(seed, (set_idx as u64) << 32 | r);
            let run = vmm_run(cfg, weights, &mut rng)?;
            all_converged &= run.program.all_converged();
            for (k, &x) in xs.iter().enumerate() {
                let y = vmm_output_noisy(
                    &run.array,
                    &run.program,
                    &run.periphs,
                    &input(x),
                    &cfg.protocol,
                    v.read_window,
                    &mut rng,
                )?
                .y;
                for j in 0..n_out {
                    noisy_sum[k][j] += y[j];
                }
            }
            if first.is_none() {
                first = Some(run);
            }
        }
        let run = first.expect("at least one run");
        let mut points = Vec::with_capacity(xs.len());
        for (k, &x) in xs.iter().enumerate() {
            let o = vmm_output(
                &run.array,
                &run.program,
                &run.periphs,
                &input(x),
                &cfg.protocol,
            )?;
            points.push(TransferPoint {
                x,
                clean: (0..n_out)
                    .map(|j| (o.plus[j], o.minus[j], o.y[j]))
                    .collect(),
                noisy_y: noisy_sum[k]
                    .iter()
                    .map(|s| s / v.noise_seeds as f64)
                    .collect(),
            });
        }
        let metric = |f: &dyn Fn(&TransferPoint) -> f64| -> Result<f64, HarnessError> {
            let s: Vec<(f64, f64)> = points.iter().map(|p| (p.x, f(p))).collect();
            Ok(linearity_metric(&s)?)
        };
        let mut clean_metric = Vec::new();
        let mut noisy_metric = Vec::new();
        for j in 0..n_out {
            clean_metric.push(metric(&|p| p.clean[j].2)?);
            noisy_metric.push(metric(&|p| p.noisy_y[j])?);
        }
        results.push(VmmSetResult {
            weights: weights.clone(),
            program: run.program,
            points,
            clean_metric,
            noisy_metric,
            all_converged,
        });
    }
    Ok(results)
}

pub fn vmm_checks(res: &[VmmSetResult]) -> Vec<Check> {
    let clean = res
        .iter()
        .flat_map(|r| r.clean_metric.iter().copied())
        .fold(0.0, f64::max);
    let noisy = res
        .iter()
        .flat_map(|r| r.noisy_metric.iter().copied())
        .fold(0.0, f64::max);
    vec![
        Check::new(
            "weights tuned",
            res.iter().all(|r| r.all_converged),
            String::new(),
        ),
        Check::new(
            "noise-free linearity < 1%",
            clean < VMM_CLEAN_LIMIT,
            format!("max {clean:.3e}"),
        ),
        Check::new(
            "noisy averaged linearity < 2%",
            noisy < VMM_NOISY_LIMIT,
            format!("max {noisy:.3e}"),
        ),
    ]
}

pub fn cmd_vmm(cfg: &ExperimentConfig, out: &Path) -> Result<Report, HarnessError> {
    let res = vmm_experiment(cfg)?;
    let mut transfer = Table::new(&[
        "set",
        "x_plus",
        "x_minus",
        "output",
        "i_plus",
        "i_minus",
        "y",
        "y_noisy_mean",
    ]);
    let mut lin = Table::new(&[
        "set",
        "output",
        "column_weight",
        "metric_clean",
        "metric_noisy",
    ]);
    for (s, r) in res.iter().enumerate() {
        for p in &r.points {
            for (j, (ip, im, y)) in p.clean.iter().enumerate() {
                transfer.push(vec![
                    s.to_string(),
                    num(p.x),
                    num(cfg.vmm.i_floor),
                    j.to_string(),
                    num(*ip),
                    num(*im),
                    num(*y),
                    num(p.noisy_y[j]),
                ]);
            }
        }
        for j in 0..r.clean_metric.len() {
            let col: f64 = r.weights.iter().map(|row| row[j]).sum();
            lin.push(vec![
                s.to_string(),
                j.to_string(),
                num(col),
                num(r.clean_metric[j]),
                num(r.noisy_metric[j]),
            ]);
        }
    }
    let hash = cfg.hash();
    let files = vec![
        write_file(out, "vmm_transfer.csv", &transfer.render(&hash, cfg.seed)?)?,
        write_file(out, "vmm_linearity.csv", &lin.render(&hash, cfg.seed)?)?,
    ];
    Ok(Report {
        files,
        checks: vmm_checks(&res),
    })
}

// ---------------------------------------------------------------- montecarlo

#[derive(Debug, Clone, PartialEq)]
pub struct McRun {
    pub sigma: f64,
    pub run: u64,
    pub cells: usize,
    pub converged: usize,
    /// Noise-free relative errors of converged cells.
    pub errors: Vec<f64>,
    pub pulses: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSummary {
    pub sigma: f64,
    pub runs: usize,
    pub success_rate: f64,
    pub err_p50: f64,
    pub err_p90: f64,
    pub err_max: f64,
    pub mean_pulses: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn mc_run(
    cfg: &ExperimentConfig,
    seed: u64,
    sigma_idx: usize,
    sigma: f64,
    run: u64,
) -> Result<McRun, HarnessError> {
    let mut rng = stream_rng(seed, (sigma_idx as u64) << 32 | run);
    let params = DeviceParams {
        variability_sigma: sigma,
        ..cfg.device
    };
    let mut array = ArrayState::draw(cfg.topology, &params, &mut rng)?;
    let cells: Vec<CellAddr> = cfg.topology.cells().collect();
    reset_cells(&mut array, &cells, &cfg.protocol, &cfg.tuning)?;
    let target = cfg.montecarlo.target;
    let plan: Vec<(CellAddr, f64)> = cells.iter().map(|&c| (c, target)).collect();
    let out = tune_sequence(&mut array, &plan, &cfg.protocol, &cfg.tuning, &mut rng)?;
    let errors = out
        .traces
        .iter()
        .zip(&out.disturb.step_current)
        .filter(|(t, _)| t.converged)
        .map(|(_, i)| (i - target).abs() / target)
        .collect();
    Ok(McRun {
        sigma,
        run,
        cells: cells.len(),
        converged: out.traces.iter().filter(|t| t.converged).count(),
        errors,
        pulses: out.traces.iter().map(|t| t.pulses_used).sum(),
    })
}

/// Independent seeded runs per variability level, fanned out in parallel
/// and returned in (sigma, run) order.
pub fn montecarlo_experiment(
    cfg: &ExperimentConfig,
) -> Result<(Vec<McRun>, Vec<McSummary>), HarnessError> {
    let seed = cfg.require_seed()?;
    let m = &cfg.montecarlo;
    let jobs: Vec<(usize, f64, u64)> = m
        .sigmas
        .iter()
        .enumerate()
        .flat_map(|(i, &s)| (0..m.runs).map(move |r| (i, s, r)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(i, s, r)| mc_run(cfg, seed, i, s, r))
        .collect::<Result<Vec<_>, _>>()?;
    let mut summary = Vec::new();
    for &sigma in &m.sigmas {
        let rs: Vec<&McRun> = runs.iter().filter(|r| r.sigma == sigma).collect();
        let cells: usize = rs.iter().map(|r| r.cells).sum();
        let conv: usize = rs.iter().map(|r| r.converged).sum();
        let mut errs: Vec<f64> = rs.iter().flat_map(|r| r.errors.iter().copied()).collect();
        errs.sort_by(f64::total_cmp);
        summary.push(McSummary {
            sigma,
            runs: rs.len(),
            success_rate: if cells == 0 {
                f64::NAN
            } else {
                conv as f64 / cells as f64
            },
            err_p50: quantile(&errs, 0.5),
            err_p90: quantile(&errs, 0.9),
            err_max: errs.last().copied().unwrap_or(f64::NAN),
            mean_pulses: if cells == 0 {
                f64::NAN
            } else {
                rs.iter().map(|r| r.pulses).sum::<usize>() as f64 / cells as f64
            },
        });
    }
    Ok((runs, summary))
}

pub fn montecarlo_checks(cfg: &ExperimentConfig, summary: &[McSummary]) -> Vec<Check> {
    let mut checks = Vec::new();
    if let Some(s) = summary
        .iter()
        .find(|s| s.sigma == cfg.device.variability_sigma)
    {
        checks.push(Check::new(
            "default variability converges >= 95%",
            s.success_rate >= MONTECARLO_SUCCESS_FLOOR,
            format!("{:.4} at sigma {}", s.success_rate, s.sigma),
        ));
    }
    let mut by_sigma: Vec<&McSummary> = summary.iter().collect();
    by_sigma.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
    let monotone = by_sigma
        .windows(2)
        .all(|w| w[1].success_rate <= w[0].success_rate);
    let rates: Vec<String> = by_sigma
        .iter()
        .map(|s| format!("{}:{:.3}", s.sigma, s.success_rate))
        .collect();
    checks.push(Check::new(
        "success non-increasing in sigma",
        monotone,
        rates.join(" "),
    ));
    checks
}

pub fn cmd_montecarlo(cfg: &ExperimentConfig, out: &Path) -> Result<Report, HarnessError> {
    let (runs, summary) = montecarlo_experiment(cfg)?;
    let mut rt = Table::new(&[
        "sigma",
        "run",
        "cells",
        "converged",
        "success_rate",
        "max_error",
        "mean_pulses",
    ]);
    for r in &runs {
        rt.push(vec![
            num(r.sigma),
            r.run.to_string(),
            r.cells.to_string(),
            r.converged.to_string(),
            num(r.converged as f64 / r.cells as f64),
            num(r.errors.iter().copied().fold(0.0, f64::max)),
            num(r.pulses as f64 / r.cells as f64),
        ]);
    }
    let mut st = Table::new(&[
        "sigma",
        "runs",
        "success_rate",
        "err_p50",
        "err_p90",
        "err_max",
        "mean_pulses",
    ]);
    for s in &summary {
        st.push(vec![
            num(s.sigma),
            s.runs.to_string(),
            num(s.success_rate),
            num(s.err_p50),
            num(s.err_p90),
            num(s.err_max),
            num(s.mean_pulses),
        ]);
    }
    let hash = cfg.hash();
    let files = vec![
        write_file(out, "montecarlo_runs.csv", &rt.render(&hash, cfg.seed)?)?,
        write_file(out, "montecarlo_summary.csv", &st.render(&hash, cfg.seed)?)?,
    ];
    Ok(Report {
        files,
        checks: montecarlo_checks(cfg, &summary),
    })
}
