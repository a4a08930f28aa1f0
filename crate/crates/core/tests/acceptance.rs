//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach the output.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use fg_array_sim::array::{
    ArrayState, ArrayTopology, BiasProtocol, CellAddr, OpKind, Operation, RoutingVariant,
};
use fg_array_sim::device::{CellState, DeviceParams, Pulse, TerminalBiases, READ_BIASES};
use fg_array_sim::harness::experiments::{disturb_experiment, tune_experiment, vmm_experiment};
use fg_array_sim::harness::{Experiment, ExperimentConfig};
use fg_array_sim::tuning::{tune_cell, EventKind, TuningConfig};
use fg_array_sim::vmm::{
    peripheral, peripherals, program_weights_exact, settle_gate, vmm_output, VmmInput,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const READ_TOLERANCE_1UA: f64 = 0.01;
const CONVERGED_FLOOR: f64 = 0.95;
const SPREAD_LIMIT_1NA: f64 = 0.05;
const DRIFT_LIMIT: f64 = 0.01;
const MODIFIED_DISTURB_LIMIT: f64 = 0.005;
const HALF_C_FLOOR: f64 = 0.10;
const INHIBIT_POINTS: usize = 31;
const VMM_CLEAN_LIMIT: f64 = 0.01;
const VMM_NOISY_LIMIT: f64 = 0.02;
const VMM_MIN_DECADES: f64 = 2.0;
const VMM_NOISE_SEEDS: u64 = 10;
const ORACLE_RATIO_LIMIT: f64 = 3.0;
const SOLVER_RESIDUAL: f64 = 1e-8;
const TUNE_RUNTIME: Duration = Duration::from_secs(60);
const DISTURB_RUNTIME: Duration = Duration::from_secs(10);

type Criterion = (u32, &'static str, fn() -> Verdict);

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn seeded(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed: Some(seed),
        ..ExperimentConfig::default()
    }
}

/// Tuning statistics over the seed set for a single target on all 8 cells.
struct TuneStats {
    converged: usize,
    cells: usize,
    max_read_error: f64,
    spread: f64,
    elapsed: Duration,
}

fn tune_all_cells(target: f64) -> TuneStats {
    let t0 = Instant::now();
    let mut s = TuneStats {
        converged: 0,
        cells: 0,
        max_read_error: 0.0,
        spread: 0.0,
        elapsed: Duration::ZERO,
    };
    for seed in 0..SEEDS {
        let mut cfg = seeded(seed);
        cfg.tune.targets = vec![target];
        assert_eq!(cfg.topology, fragment(RoutingVariant::Modified));
        let res = tune_experiment(&cfg).unwrap();
        for t in &res.outcome.traces {
            s.cells += 1;
            if t.converged {
                s.converged += 1;
                s.max_read_error = s.max_read_error.max(t.relative_error());
            }
        }
        s.spread = s.spread.max(res.max_true_error());
    }
    s.elapsed = t0.elapsed();
    s
}

fn criterion_1() -> Verdict {
    let s = tune_all_cells(1e-6);
    let frac = s.converged as f64 / s.cells as f64;
    verdict(
        frac >= CONVERGED_FLOOR
            && s.max_read_error <= READ_TOLERANCE_1UA
            && s.elapsed < TUNE_RUNTIME,
        format!(
            "{}/{} converged, worst averaged read {:.4}, true spread {:.4}, {:.2?}",
            s.converged, s.cells, s.max_read_error, s.spread, s.elapsed
        ),
    )
}

fn criterion_2() -> Verdict {
    let hi = tune_all_cells(1e-6);
    let lo = tune_all_cells(1e-9);
    verdict(
        lo.spread <= SPREAD_LIMIT_1NA && lo.spread > hi.spread && lo.elapsed < TUNE_RUNTIME,
        format!(
            "1 nA spread {:.4} vs 1 uA spread {:.4}, {}/{} converged, {:.2?}",
            lo.spread, hi.spread, lo.converged, lo.cells, lo.elapsed
        ),
    )
}

fn criterion_3() -> Verdict {
    let mut all_converged = true;
    let mut drift = 0.0f64;
    let mut steps = 0;
    for seed in 0..SEEDS {
        let cfg = seeded(seed);
        assert_eq!(cfg.tune.targets, TARGETS.to_vec());
        let res = tune_experiment(&cfg).unwrap();
        steps += res.plan.len();
        all_converged &= res.all_converged();
        drift = drift.max(res.outcome.disturb.max_drift);
    }
    verdict(
        all_converged && drift < DRIFT_LIMIT,
        format!("{steps} tunings over {SEEDS} seeds, all converged {all_converged}, max drift {drift:.3e}"),
    )
}

fn criterion_4() -> Verdict {
    let t0 = Instant::now();
    let res = disturb_experiment(&seeded(1)).unwrap();
    let elapsed = t0.elapsed();
    let m = res.modified_max_nonselected();
    let swept: Vec<f64> = {
        let mut v: Vec<f64> = res
            .rows
            .iter()
            .filter(|r| r.routing == RoutingVariant::Original)
            .map(|r| r.v_d_inhibit)
            .collect();
        v.dedup();
        v
    };
    let admissible = res.admissible_inhibits();
    let c = res.original_min_half_c();
    let grid_ok = swept.len() == INHIBIT_POINTS
        && swept
            .iter()
            .enumerate()
            .all(|(k, v)| (v - 0.1 * k as f64).abs() < 1e-9);
    verdict(
        m < MODIFIED_DISTURB_LIMIT
            && grid_ok
            && !admissible.is_empty()
            && c >= HALF_C_FLOOR
            && res.selected_changed()
            && elapsed < DISTURB_RUNTIME,
        format!(
            "modified max {m:.3e}, original min type-C {c:.3} over {}/{} admissible inhibits, {elapsed:.2?}",
            admissible.len(),
            swept.len()
        ),
    )
}

fn criterion_5() -> Verdict {
    let cfg = seeded(5);
    let v = &cfg.vmm;
    let decades = (v.x_max / v.x_min).log10();
    let shapes: Vec<(usize, usize)> = v
        .weight_sets
        .iter()
        .map(|w| (w.len(), w[0].len()))
        .collect();
    let res = vmm_experiment(&cfg).unwrap();
    let clean = res
        .iter()
        .flat_map(|r| r.clean_metric.iter().copied())
        .fold(0.0, f64::max);
    let noisy = res
        .iter()
        .flat_map(|r| r.noisy_metric.iter().copied())
        .fold(0.0, f64::max);
    let converged = res.iter().all(|r| r.all_converged);
    verdict(
        decades >= VMM_MIN_DECADES
            && shapes.contains(&(1, 1))
            && shapes.contains(&(2, 2))
            && v.noise_seeds == VMM_NOISE_SEEDS
            && converged
            && clean < VMM_CLEAN_LIMIT
            && noisy < VMM_NOISY_LIMIT,
        format!("{decades:.1} decades, sets {shapes:?}, noise-free {clean:.3e}, noisy {noisy:.3e}"),
    )
}

// ------------------------------------------------------------ criterion 6

fn device_properties(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let p = quiet();
    for _ in 0..200 {
        let q0 = rng.random_range(p.q_min..=p.q_max);
        let src = rng.random_range(4.5..=9.0);
        let gate = rng.random_range(5.0..=10.0);
        let (mut a, mut b) = (CellState::with_q(p, q0), CellState::with_q(p, q0));
        let (mut ia, mut ib) = (
            a.read_current(&READ_BIASES).unwrap(),
            b.read_current(&READ_BIASES).unwrap(),
        );
        for _ in 0..20 {
            a = a
                .pulse_update(
                    &Pulse::new(TerminalBiases::new(1.6, 0.0, src).unwrap(), 5e-6).unwrap(),
                )
                .unwrap()
                .0;
            b = b
                .pulse_update(
                    &Pulse::new(TerminalBiases::new(gate, 0.0, 0.0).unwrap(), 1e-3).unwrap(),
                )
                .unwrap()
                .0;
            let (na, nb) = (
                a.read_current(&READ_BIASES).unwrap(),
                b.read_current(&READ_BIASES).unwrap(),
            );
            if na > ia || nb < ib {
                return Err(format!("monotonicity at q0 {q0}"));
            }
            (ia, ib) = (na, nb);
        }
    }
    let dp = DeviceParams::default();
    for k in 0..=100 {
        let q = dp.q_min + (dp.q_max - dp.q_min) * k as f64 / 100.0;
        let s = CellState::with_q(dp, q);
        if s.rates(&READ_BIASES).unwrap() != (0.0, 0.0) {
            return Err(format!("readout rates non-zero at q {q}"));
        }
        if q + dp.decade_q() <= dp.q_max {
            let lo = s.read_current(&READ_BIASES).unwrap();
            let hi = CellState::with_q(dp, q + dp.decade_q())
                .read_current(&READ_BIASES)
                .unwrap();
            if hi < dp.i_max && (hi / lo - 10.0).abs() > 1e-9 {
                return Err(format!("decade ratio {} at q {q}", hi / lo));
            }
        }
    }
    Ok(())
}

fn array_properties() -> Result<(), String> {
    let proto = BiasProtocol::default();
    for routing in [RoutingVariant::Original, RoutingVariant::Modified] {
        for rows in [2, 4, 6, 8] {
            for cols in [2, 3, 5] {
                let topo = ArrayTopology::new(rows, cols, routing).unwrap();
                for sel in topo.cells() {
                    for op in [
                        Operation::Program { amplitude: 7.0 },
                        Operation::Erase { amplitude: 9.0 },
                        Operation::Read,
                    ] {
                        if !line_consistent(&topo, op, sel, &proto) {
                            return Err(format!(
                                "{routing} {rows}x{cols} {op:?} {sel}: line inconsistent"
                            ));
                        }
                        let n_sel = topo
                            .cells()
                            .filter(|c| {
                                topo.classify(op.kind(), sel, *c).unwrap()
                                    == fg_array_sim::array::CellClass::Selected
                            })
                            .count();
                        if n_sel != 1 {
                            return Err(format!("{n_sel} selected cells"));
                        }
                    }
                }
            }
        }
        let topo = fragment(routing);
        for op in [OpKind::Program, OpKind::Erase, OpKind::Read] {
            for sel in [CellAddr::new(0, 0), CellAddr::new(3, 1)] {
                if class_table(&topo, op, sel) != hand_table(routing, op, sel).unwrap() {
                    return Err(format!(
                        "{routing} {op:?} {sel}: classes differ from hand table"
                    ));
                }
            }
        }
    }
    Ok(())
}

fn tuning_properties(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let proto = BiasProtocol::default();
    let dp = DeviceParams::default();
    for _ in 0..60 {
        let target = TARGETS[rng.random_range(0..4)];
        let q0 = rng.random_range(dp.q_min..=dp.q_max);
        let cfg = TuningConfig::default().with_target(target);
        let mut a = ArrayState::uniform(
            fragment(RoutingVariant::Modified),
            CellState::with_q(dp, q0),
        )
        .unwrap();
        let tr = tune_cell(&mut a, CellAddr::new(2, 1), &proto, &cfg, rng).unwrap();
        let ev = &tr.events;
        let alternates = ev.len() % 2 == 1
            && ev
                .iter()
                .enumerate()
                .all(|(k, e)| (e.kind == EventKind::Read) == (k % 2 == 0));
        if !alternates {
            return Err(format!(
                "trace does not alternate (q0 {q0}, target {target:e})"
            ));
        }
        let tunes: Vec<_> = ev.iter().filter(|e| e.kind != EventKind::Read).collect();
        for w in tunes.windows(2) {
            let s = if w[1].kind == EventKind::Program {
                cfg.program_ramp
            } else {
                cfg.erase_ramp
            };
            if w[1].amplitude > s.max_amplitude {
                return Err(format!("amplitude {} above cap", w[1].amplitude));
            }
            if w[0].kind == w[1].kind
                && (w[1].amplitude - (w[0].amplitude + s.step).min(s.max_amplitude)).abs() > 1e-9
            {
                return Err(format!(
                    "ramp step {} -> {}",
                    w[0].amplitude, w[1].amplitude
                ));
            }
        }
    }
    for start in [CellState::erased(quiet()), CellState::programmed(quiet())] {
        for t in TARGETS {
            let cfg = TuningConfig::default().with_target(t);
            let mut a = ArrayState::uniform(fragment(RoutingVariant::Modified), start).unwrap();
            let tr = tune_cell(&mut a, CellAddr::new(0, 0), &proto, &cfg, rng).unwrap();
            if !tr.converged {
                return Err(format!(
                    "no noiseless convergence from q {} to {t:e}",
                    start.q
                ));
            }
        }
    }
    Ok(())
}

/// Worst tuner/oracle pulse-count ratio over both endpoints and all targets.
fn oracle_ratio() -> Result<f64, String> {
    let proto = BiasProtocol::default();
    let mut worst = 0.0f64;
    for start in [CellState::erased(quiet()), CellState::programmed(quiet())] {
        for t in TARGETS {
            let cfg = TuningConfig::default().with_target(t);
            let mut a = ArrayState::uniform(
                ArrayTopology::new(2, 2, RoutingVariant::Modified).unwrap(),
                start,
            )
            .unwrap();
            let tr = tune_cell(
                &mut a,
                CellAddr::new(0, 0),
                &proto,
                &cfg,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
            let o =
                oracle_pulses(start, t, &cfg, &proto).ok_or(format!("oracle failed for {t:e}"))?;
            if !tr.converged {
                return Err(format!("tuner failed for {t:e}"));
            }
            worst = worst.max(tr.pulses_used as f64 / o.max(1) as f64);
        }
    }
    Ok(worst)
}

fn vmm_properties(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let proto = BiasProtocol::default();
    let (i_ref, floor) = (1e-6, 5e-9);
    let setup = |w: &[Vec<f64>]| {
        let topo = ArrayTopology::new(4, 4, RoutingVariant::Modified).unwrap();
        let mut a = ArrayState::uniform(topo, CellState::erased(quiet())).unwrap();
        let p = program_weights_exact(&mut a, w, i_ref, floor, &proto).unwrap();
        (a, p)
    };
    let periphs = peripherals(2, &quiet(), i_ref, &proto).unwrap();
    for _ in 0..50 {
        let w: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        let neg: Vec<Vec<f64>> = w.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        let mut x = || (floor * (i_ref / floor).powf(rng.random::<f64>())).clamp(floor, i_ref);
        let pairs = vec![(x(), x()), (x(), x())];
        let (a, p) = setup(&w);
        let (b, q) = setup(&neg);
        let out = |arr: &ArrayState, prog, pairs: Vec<(f64, f64)>| {
            vmm_output(arr, prog, &periphs, &VmmInput { pairs }, &proto)
                .unwrap()
                .y
        };
        let y = out(&a, &p, pairs.clone());
        let y1 = out(&a, &p, vec![pairs[0], (floor, floor)]);
        let y2 = out(&a, &p, vec![(floor, floor), pairs[1]]);
        let z = out(&b, &q, pairs.clone());
        for j in 0..2 {
            if (y[j] - y1[j] - y2[j]).abs() > SOLVER_RESIDUAL * i_ref {
                return Err(format!("superposition off by {:e}", y[j] - y1[j] - y2[j]));
            }
            if (y[j] + z[j]).abs() > SOLVER_RESIDUAL * i_ref {
                return Err(format!("sign symmetry off by {:e}", y[j] + z[j]));
            }
        }
    }
    let periph = peripheral(&quiet(), i_ref, &proto).unwrap();
    for i_in in [1e-9, 7.7e-9, 3e-8, 2.2e-7, 1e-6, 1.9e-6] {
        let (scan, step) = grid_scan_gate(&periph, i_in, &proto, 1_000_001);
        let v = settle_gate(&periph, i_in, &proto).map_err(|e| e.to_string())?;
        if (v - scan).abs() > step {
            return Err(format!("settle_gate {v} vs grid {scan} at {i_in:e}"));
        }
    }
    Ok(())
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failures = Vec::new();
    let mut record = |name: &str, r: Result<(), String>| {
        if let Err(e) = r {
            failures.push(format!("{name}: {e}"));
        }
    };
    record("device", device_properties(&mut rng));
    record("array", array_properties());
    record("tuning", tuning_properties(&mut rng));
    let ratio = oracle_ratio();
    record(
        "oracle",
        match &ratio {
            Ok(r) if *r <= ORACLE_RATIO_LIMIT => Ok(()),
            Ok(r) => Err(format!("ratio {r:.2}")),
            Err(e) => Err(e.clone()),
        },
    );
    record("vmm", vmm_properties(&mut rng));
    let detail = match (&ratio, failures.is_empty()) {
        (Ok(r), true) => {
            format!("device, array, tuning, vmm suites clean; worst oracle ratio {r:.2}")
        }
        _ => failures.join("; "),
    };
    verdict(failures.is_empty(), detail)
}

// ------------------------------------------------------------ criterion 7

fn read_dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn criterion_7() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    fs::write(&config, "").unwrap();
    let mut problems = Vec::new();
    let mut files = 0;
    for exp in Experiment::ALL {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let out = tmp.path().join(format!("{exp}-{run}"));
            let status = Command::new(env!("CARGO_BIN_EXE_fg-array-sim"))
                .arg(exp.name())
                .arg("--config")
                .arg(&config)
                .args(["--seed", "11", "--out"])
                .arg(&out)
                .output()
                .unwrap();
            if !status.status.success() {
                problems.push(format!("{exp} exited {:?}", status.status.code()));
            }
            outputs.push(read_dir_files(&out));
        }
        files += outputs[0].len();
        if outputs[0].is_empty() || outputs[0] != outputs[1] {
            problems.push(format!("{exp} outputs differ"));
        }
    }
    let detail = if problems.is_empty() {
        format!(
            "{} experiments, {files} files byte-identical across two runs",
            Experiment::ALL.len()
        )
    } else {
        problems.join("; ")
    };
    verdict(problems.is_empty(), detail)
}

fn main() {
    let criteria: [Criterion; 7] = [
        (1, "1 uA tuning precision", criterion_1),
        (2, "1 nA precision degradation", criterion_2),
        (3, "four-target dynamic range", criterion_3),
        (4, "disturb asymmetry", criterion_4),
        (5, "VMM linearity", criterion_5),
        (6, "property suites", criterion_6),
        (7, "CLI determinism", criterion_7),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        let label = format!("criterion {n}");
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|p| label.contains(p.as_str()) || name.contains(p.as_str()))
        {
            continue;
        }
        let v = f();
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("{tag} {label}: {name} ({})", v.detail);
        if !v.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
