//! Gate-coupled four-quadrant vector-by-matrix multiplier.
//!
//! Each input current drives a diode-connected peripheral cell whose settled
//! gate voltage is shared by one logical row of the array. Row `2i` carries
//! `x⁺ᵢ`, row `2i + 1` carries `x⁻ᵢ`; column `2j` sums into `out⁺ⱼ` and
//! column `2j + 1` into `out⁻ⱼ`. With cell targets
//!
//! ```text
//! (x⁺, out⁺) = I⁺   (x⁺, out⁻) = I⁻
//! (x⁻, out⁺) = I⁻   (x⁻, out⁻) = I⁺
//! ```
//!
//! and `I± = i_floor + i_ref·(1 ± w)/2`, the output is
//! `yⱼ = Σᵢ wᵢⱼ·(x⁺ᵢ − x⁻ᵢ)`.
//!
//! Rows here are logical input lines. They are not the physical gate lines
//! of either routing, which only matter while programming.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::{ArrayState, BiasProtocol, CellAddr, Grid};
use crate::device::{
    state_for_current, CellState, DeviceParams, TerminalBiases, SAFE_MAX_V, SAFE_MIN_V,
};
use crate::error::{Result, SimError};
use crate::tuning::{
    reset_cells, tune_sequence, TuningConfig, TuningTrace, MAX_TARGET_A, MIN_TARGET_A,
};

const SETTLE_REL_RESIDUAL: f64 = 1e-9;
const MIN_LINEARITY_SAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmmProgram {
    /// `weights[i][j]` couples input `i` to output `j`.
    pub weights: Vec<Vec<f64>>,
    pub i_ref: f64,
    pub i_floor: f64,
    /// Read-point target of every cell in the `2n_in × 2n_out` block.
    pub cell_targets: Grid<f64>,
    /// Noise-free read-point current each cell actually holds.
    pub achieved: Grid<f64>,
    /// Empty when the weights were written analytically.
    #[serde(skip)]
    pub traces: Vec<TuningTrace>,
}

impl VmmProgram {
    pub fn n_inputs(&self) -> usize {
        self.weights.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    /// Weight implied by the achieved currents of one 2×2 block.
    pub fn reconstructed_weight(&self, i: usize, j: usize) -> f64 {
        let a = |r, c| *self.achieved.get(CellAddr::new(r, c));
        let (p, m) = (2 * i, 2 * i + 1);
        let (op, om) = (2 * j, 2 * j + 1);
        ((a(p, op) - a(p, om)) + (a(m, om) - a(m, op))) / (2.0 * self.i_ref)
    }

    pub fn all_converged(&self) -> bool {
        self.traces.iter().all(|t| t.converged)
    }
}

/// Differential input pair per input line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmmInput {
    pub pairs: Vec<(f64, f64)>,
}

impl VmmInput {
    pub fn validate(&self, program: &VmmProgram) -> Result<()> {
        if self.pairs.len() != program.n_inputs() {
            return Err(SimError::InvalidParams(format!(
                "{} input pairs for {} input lines",
                self.pairs.len(),
                program.n_inputs()
            )));
        }
        // small slack so a sweep endpoint computed in floating point is accepted
        let (lo, hi) = (program.i_floor * (1.0 - 1e-9), program.i_ref * (1.0 + 1e-9));
        for &(p, m) in &self.pairs {
            for x in [p, m] {
                if !(x >= lo && x <= hi) {
                    return Err(SimError::range(
                        "input current",
                        x,
                        program.i_floor,
                        program.i_ref,
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmmOutput {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
    pub y: Vec<f64>,
}

/// `I± = i_floor + i_ref·(1 ± w)/2`.
pub fn weight_targets(w: f64, i_ref: f64, i_floor: f64) -> (f64, f64) {
    (
        i_floor + i_ref * (1.0 + w) / 2.0,
        i_floor + i_ref * (1.0 - w) / 2.0,
    )
}

fn check_weights(array: &ArrayState, weights: &[Vec<f64>], i_ref: f64, i_floor: f64) -> Result<()> {
    let n_in = weights.len();
    let n_out = weights.first().map_or(0, Vec::len);
    if n_in == 0 || n_out == 0 || weights.iter().any(|r| r.len() != n_out) {
        return Err(SimError::InvalidParams(
            "weight matrix must be non-empty and rectangular".into(),
        ));
    }
    let topo = &array.topology;
    if topo.rows < 2 * n_in || topo.cols < 2 * n_out {
        return Err(SimError::ShapeMismatch {
            expected_rows: 2 * n_in,
            expected_cols: 2 * n_out,
            rows: topo.rows,
            cols: topo.cols,
        });
    }
    for &w in weights.iter().flatten() {
        if !(-1.0..=1.0).contains(&w) {
            return Err(SimError::range("weight", w, -1.0, 1.0));
        }
    }
    if !(i_floor >= MIN_TARGET_A) {
        return Err(SimError::range(
            "i_floor",
            i_floor,
            MIN_TARGET_A,
            MAX_TARGET_A,
        ));
    }
    if !(i_ref > 0.0 && i_floor + i_ref <= MAX_TARGET_A) {
        return Err(SimError::range("i_ref", i_ref, 0.0, MAX_TARGET_A - i_floor));
    }
    Ok(())
}

fn target_grid(weights: &[Vec<f64>], i_ref: f64, i_floor: f64) -> Grid<f64> {
    let n_out = weights[0].len();
    Grid::from_fn(2 * weights.len(), 2 * n_out, |c| {
        let (hi, lo) = weight_targets(weights[c.row / 2][c.col / 2], i_ref, i_floor);
        if (c.row % 2) == (c.col % 2) {
            hi
        } else {
            lo
        }
    })
}

fn achieved_grid(
    array: &ArrayState,
    targets: &Grid<f64>,
    protocol: &BiasProtocol,
) -> Result<Grid<f64>> {
    let mut out = targets.clone();
    for r in 0..targets.rows {
        for c in 0..targets.cols {
            let addr = CellAddr::new(r, c);
            *out.get_mut(addr) = array.read_cell_exact(addr, protocol)?;
        }
    }
    Ok(out)
}

/// Write the weights through the closed-loop tuner.
///
/// Every block cell is reset first, then tuned in row-major order.
pub fn program_weights<R: Rng + ?Sized>(
    array: &mut ArrayState,
    weights: &[Vec<f64>],
    i_ref: f64,
    i_floor: f64,
    protocol: &BiasProtocol,
    config: &TuningConfig,
    rng: &mut R,
) -> Result<VmmProgram> {
    check_weights(array, weights, i_ref, i_floor)?;
    let cell_targets = target_grid(weights, i_ref, i_floor);
    let plan: Vec<(CellAddr, f64)> = cell_targets.iter().map(|(c, t)| (c, *t)).collect();
    let cells: Vec<CellAddr> = plan.iter().map(|(c, _)| *c).collect();
    reset_cells(array, &cells, protocol, config)?;
    let outcome = tune_sequence(array, &plan, protocol, config, rng)?;
    let achieved = achieved_grid(array, &cell_targets, protocol)?;
    Ok(VmmProgram {
        weights: weights.to_vec(),
        i_ref,
        i_floor,
        cell_targets,
        achieved,
        traces: outcome.traces,
    })
}

/// Write the weights by setting each cell's charge analytically.
pub fn program_weights_exact(
    array: &mut ArrayState,
    weights: &[Vec<f64>],
    i_ref: f64,
    i_floor: f64,
    protocol: &BiasProtocol,
) -> Result<VmmProgram> {
    check_weights(array, weights, i_ref, i_floor)?;
    let cell_targets = target_grid(weights, i_ref, i_floor);
    let read = protocol.read.biases();
    for (addr, &t) in cell_targets.iter() {
        let params = array.cell(addr)?.params;
        *array.cell_mut(addr)? = state_for_current(t, &read, &params)?;
    }
    let achieved = achieved_grid(array, &cell_targets, protocol)?;
    Ok(VmmProgram {
        weights: weights.to_vec(),
        i_ref,
        i_floor,
        cell_targets,
        achieved,
        traces: Vec::new(),
    })
}

/// Diode-connected peripheral holding `i_ref` at the read point.
pub fn peripheral(params: &DeviceParams, i_ref: f64, protocol: &BiasProtocol) -> Result<CellState> {
    state_for_current(i_ref, &protocol.read.biases(), params)
}

/// One peripheral per logical row, all from the same parameters.
pub fn peripherals(
    n_inputs: usize,
    params: &DeviceParams,
    i_ref: f64,
    protocol: &BiasProtocol,
) -> Result<Vec<CellState>> {
    let p = peripheral(params, i_ref, protocol)?;
    Ok(vec![p; 2 * n_inputs])
}

/// Gate voltage at which the peripheral, at the read drain/source rails,
/// sinks `i_in`. Bisection over the safe gate range.
pub fn settle_gate(periph: &CellState, i_in: f64, protocol: &BiasProtocol) -> Result<f64> {
    let rails = protocol.read;
    let current = |v_g: f64| {
        periph.read_current(&TerminalBiases {
            v_g,
            v_d: rails.v_d,
            v_s: rails.v_s,
        })
    };
    let (mut lo, mut hi) = (SAFE_MIN_V, SAFE_MAX_V);
    let (i_lo, i_hi) = (current(lo)?, current(hi)?);
    if !(i_in >= i_lo && i_in <= i_hi) || !(i_in > 0.0) {
        return Err(SimError::range(
            "peripheral input current",
            i_in,
            i_lo,
            i_hi,
        ));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let i = current(mid)?;
        if ((i - i_in) / i_in).abs() < SETTLE_REL_RESIDUAL {
            return Ok(mid);
        }
        if i < i_in {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn row_gates(
    program: &VmmProgram,
    periphs: &[CellState],
    input: &VmmInput,
    protocol: &BiasProtocol,
) -> Result<Vec<f64>> {
    input.validate(program)?;
    if periphs.len() != 2 * program.n_inputs() {
        return Err(SimError::InvalidParams(format!(
            "{} peripherals for {} logical rows",
            periphs.len(),
            2 * program.n_inputs()
        )));
    }
    let mut gates = Vec::with_capacity(periphs.len());
    for (i, &(xp, xm)) in input.pairs.iter().enumerate() {
        gates.push(settle_gate(&periphs[2 * i], xp, protocol)?);
        gates.push(settle_gate(&periphs[2 * i + 1], xm, protocol)?);
    }
    Ok(gates)
}

fn accumulate(
    array: &ArrayState,
    program: &VmmProgram,
    gates: &[f64],
    protocol: &BiasProtocol,
    mut cell_current: impl FnMut(&CellState, &TerminalBiases) -> Result<f64>,
) -> Result<VmmOutput> {
    let n_out = program.n_outputs();
    let mut plus = vec![0.0; n_out];
    let mut minus = vec![0.0; n_out];
    for (row, &v_g) in gates.iter().enumerate() {
        let b = TerminalBiases::new(v_g, protocol.read.v_d, protocol.read.v_s)?;
        for j in 0..n_out {
            plus[j] += cell_current(array.cell(CellAddr::new(row, 2 * j))?, &b)?;
            minus[j] += cell_current(array.cell(CellAddr::new(row, 2 * j + 1))?, &b)?;
        }
    }
    let y = plus.iter().zip(&minus).map(|(p, m)| p - m).collect();
    Ok(VmmOutput { plus, minus, y })
}

/// Noise-free differential output currents.
pub fn vmm_output(
    array: &ArrayState,
    program: &VmmProgram,
    periphs: &[CellState],
    input: &VmmInput,
    protocol: &BiasProtocol,
) -> Result<VmmOutput> {
    let gates = row_gates(program, periphs, input, protocol)?;
    accumulate(array, program, &gates, protocol, |c, b| c.read_current(b))
}

/// Output currents with every cell contribution read through the noise model.
pub fn vmm_output_noisy<R: Rng + ?Sized>(
    array: &ArrayState,
    program: &VmmProgram,
    periphs: &[CellState],
    input: &VmmInput,
    protocol: &BiasProtocol,
    window: f64,
    rng: &mut R,
) -> Result<VmmOutput> {
    let gates = row_gates(program, periphs, input, protocol)?;
    accumulate(array, program, &gates, protocol, |c, b| {
        c.sample_readout(b, window, rng)
    })
}

/// `(max d − min d) / median d` over centered finite differences.
pub fn linearity_metric(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.len() < MIN_LINEARITY_SAMPLES {
        return Err(SimError::InvalidParams(format!(
            "linearity needs at least {MIN_LINEARITY_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(SimError::InvalidParams(
            "x samples must be strictly increasing".into(),
        ));
    }
    let mut d: Vec<f64> = samples
        .windows(3)
        .map(|w| (w[2].1 - w[0].1) / (w[2].0 - w[0].0))
        .collect();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if median == 0.0 {
        return Err(SimError::InvalidParams("median derivative is zero".into()));
    }
    Ok(((d[n - 1] - d[0]) / median).abs())
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_sweep(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| {
            if k == 0 {
                lo
            } else if k + 1 == n {
                hi
            } else {
                (a + (b - a) * k as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}
