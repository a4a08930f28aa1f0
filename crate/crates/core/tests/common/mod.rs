#![allow(dead_code)]

use fg_array_sim::array::{
    ArrayState, ArrayTopology, BiasProtocol, CellAddr, CellClass, OpKind, Operation, RoutingVariant,
};
use fg_array_sim::device::{CellState, DeviceParams, TerminalBiases, SAFE_MAX_V, SAFE_MIN_V};
use fg_array_sim::tuning::TuningConfig;

pub const TARGETS: [f64; 4] = [1e-6, 1e-7, 1e-8, 1e-9];

/// Defaults with the readout noise switched off.
pub fn quiet() -> DeviceParams {
    DeviceParams {
        noise_a: 0.0,
        noise_b: 0.0,
        ..DeviceParams::default()
    }
}

pub fn fragment(routing: RoutingVariant) -> ArrayTopology {
    ArrayTopology::new(4, 2, routing).unwrap()
}

/// Greedy one-step lookahead tuner.
///
/// Keeps the same per-direction ramp bookkeeping as the real tuner but reads
/// noise-free and, at every step, simulates both the next program and the
/// next erase pulse, keeping whichever lands closer to the target. Ties go
/// to the toward-target direction. Returns the pulse count to convergence.
pub fn oracle_pulses(
    start: CellState,
    target: f64,
    cfg: &TuningConfig,
    proto: &BiasProtocol,
) -> Option<usize> {
    let topo = ArrayTopology::new(2, 2, RoutingVariant::Modified).unwrap();
    let mut a = ArrayState::uniform(topo, start).unwrap();
    let cell = CellAddr::new(0, 0);
    let mut last: [Option<usize>; 2] = [None, None];
    let mut last_dir: Option<usize> = None;
    for n in 0..=cfg.max_pulses {
        let i = a.read_cell_exact(cell, proto).unwrap();
        if (i - target).abs() / target <= cfg.rel_tolerance {
            return Some(n);
        }
        let toward = if i > target { 0 } else { 1 };
        let mut best: Option<(f64, usize, usize, ArrayState)> = None;
        for d in [toward, 1 - toward] {
            let sched = if d == 0 {
                &cfg.program_ramp
            } else {
                &cfg.erase_ramp
            };
            let idx = match (last_dir, last[d]) {
                (Some(ld), Some(l)) if ld == d => (l + 1).min(sched.max_index()),
                (_, Some(l)) => l.saturating_sub(cfg.backoff_steps),
                (_, None) => 0,
            };
            let amplitude = sched.amplitude(idx);
            let op = if d == 0 {
                Operation::Program { amplitude }
            } else {
                Operation::Erase { amplitude }
            };
            let mut b = a.clone();
            b.apply_operation(op, cell, proto, sched.pulse_duration)
                .unwrap();
            let err = (b.read_cell_exact(cell, proto).unwrap() - target).abs();
            if best.as_ref().is_none_or(|x| err < x.0) {
                best = Some((err, d, idx, b));
            }
        }
        let (_, d, idx, b) = best.unwrap();
        last[d] = Some(idx);
        last_dir = Some(d);
        a = b;
    }
    None
}

/// Gate voltage minimizing |I - i_in| over a uniform grid of `n` points on
/// the safe range, with the grid spacing.
pub fn grid_scan_gate(periph: &CellState, i_in: f64, proto: &BiasProtocol, n: usize) -> (f64, f64) {
    let step = (SAFE_MAX_V - SAFE_MIN_V) / (n - 1) as f64;
    let mut best = (f64::INFINITY, SAFE_MIN_V);
    for k in 0..n {
        let v_g = SAFE_MIN_V + step * k as f64;
        let b = TerminalBiases {
            v_g,
            v_d: proto.read.v_d,
            v_s: proto.read.v_s,
        };
        let err = (periph.read_current(&b).unwrap() - i_in).abs();
        if err < best.0 {
            best = (err, v_g);
        }
    }
    (best.1, step)
}

/// Hand-enumerated class tables for the 4x2 fragment (two supercells per
/// bit line). `S` selected, `A`-`E` half-select classes, `.` unselected.
pub fn hand_table(
    routing: RoutingVariant,
    op: OpKind,
    selected: CellAddr,
) -> Option<[&'static str; 4]> {
    use OpKind::*;
    use RoutingVariant::*;
    let t = match (routing, op, (selected.row, selected.col)) {
        (Original, Program, (0, 0)) => ["SA", "BB", "..", ".."],
        (Original, Erase, (0, 0)) => ["SC", "..", "..", ".."],
        (Modified, Program, (0, 0)) => ["SB", "BB", "D.", ".."],
        (Modified, Erase, (0, 0)) => ["S.", "..", "E.", ".."],
        (Original, Program, (3, 1)) => ["..", "..", "BB", "AS"],
        (Original, Erase, (3, 1)) => ["..", "..", "..", "CS"],
        (Modified, Program, (3, 1)) => ["..", ".D", "BB", "BS"],
        (Modified, Erase, (3, 1)) => ["..", ".E", "..", ".S"],
        (_, Read, _) => {
            let mut t = ["..", "..", "..", ".."];
            t[selected.row] = if selected.col == 0 { "S." } else { ".S" };
            t
        }
        _ => return None,
    };
    Some(t)
}

pub fn class_char(c: CellClass) -> char {
    match c {
        CellClass::Selected => 'S',
        CellClass::HalfA => 'A',
        CellClass::HalfB => 'B',
        CellClass::HalfC => 'C',
        CellClass::HalfD => 'D',
        CellClass::HalfE => 'E',
        CellClass::Unselected => '.',
    }
}

/// Classes of every cell in the fragment, row-major strings.
pub fn class_table(topo: &ArrayTopology, op: OpKind, selected: CellAddr) -> Vec<String> {
    (0..topo.rows)
        .map(|r| {
            (0..topo.cols)
                .map(|c| class_char(topo.classify(op, selected, CellAddr::new(r, c)).unwrap()))
                .collect()
        })
        .collect()
}

/// Check that every cell sharing a line with another carries the same
/// voltage on that terminal.
pub fn line_consistent(
    topo: &ArrayTopology,
    op: Operation,
    selected: CellAddr,
    proto: &BiasProtocol,
) -> bool {
    let map = topo.bias_map(op, selected, proto).unwrap();
    let cells: Vec<CellAddr> = topo.cells().collect();
    for &a in &cells {
        for &b in &cells {
            let (la, lb) = (topo.lines(a).unwrap(), topo.lines(b).unwrap());
            let (ba, bb) = (map.get(a), map.get(b));
            if la.gate_line == lb.gate_line && ba.v_g != bb.v_g {
                return false;
            }
            if la.source_line == lb.source_line && ba.v_s != bb.v_s {
                return false;
            }
            if la.bit_line == lb.bit_line && ba.v_d != bb.v_d {
                return false;
            }
        }
    }
    true
}
