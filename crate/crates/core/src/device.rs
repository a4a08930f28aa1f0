//! Behavioral model of one asymmetric floating-gate cell.
//!
//! The floating-gate potential is a capacitive divider over the three
//! terminals plus a charge offset `q`. Readout is a subthreshold exponential
//! in that potential with a hard saturation clamp. Programming (hot-electron
//! injection from the source side) lowers `q`; erasure (Fowler-Nordheim
//! tunneling to the control gate) raises it. Both rate laws are exponential.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Lowest terminal voltage the device tolerates.
pub const SAFE_MIN_V: f64 = -2.0;
/// Highest terminal voltage the device tolerates.
pub const SAFE_MAX_V: f64 = 12.0;
/// Longest single pulse.
pub const MAX_PULSE_S: f64 = 1.0;
/// Averaging window the noise coefficients are quoted at.
pub const REFERENCE_WINDOW_S: f64 = 10e-3;
/// Current at which the shot-like noise term equals `noise_b`.
const NOISE_REFERENCE_A: f64 = 1e-9;
/// Exponent ceiling so rate evaluation never overflows to infinity.
const MAX_EXPONENT: f64 = 600.0;

/// Standard readout point: gate 2.5 V, drain 1 V, source grounded.
pub const READ_BIASES: TerminalBiases = TerminalBiases {
    v_g: 2.5,
    v_d: 1.0,
    v_s: 0.0,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalBiases {
    pub v_g: f64,
    pub v_d: f64,
    pub v_s: f64,
}

impl TerminalBiases {
    pub fn new(v_g: f64, v_d: f64, v_s: f64) -> Result<Self> {
        let b = TerminalBiases { v_g, v_d, v_s };
        b.validate()?;
        Ok(b)
    }

    pub const fn grounded() -> Self {
        TerminalBiases {
            v_g: 0.0,
            v_d: 0.0,
            v_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("v_g", self.v_g), ("v_d", self.v_d), ("v_s", self.v_s)] {
            if !v.is_finite() || !(SAFE_MIN_V..=SAFE_MAX_V).contains(&v) {
                return Err(SimError::range(what, v, SAFE_MIN_V, SAFE_MAX_V));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub biases: TerminalBiases,
    pub duration: f64,
}

impl Pulse {
    pub fn new(biases: TerminalBiases, duration: f64) -> Result<Self> {
        let p = Pulse { biases, duration };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.biases.validate()?;
        if !(self.duration > 0.0 && self.duration <= MAX_PULSE_S) {
            return Err(SimError::range(
                "pulse duration",
                self.duration,
                0.0,
                MAX_PULSE_S,
            ));
        }
        Ok(())
    }
}

/// Parameters of the behavioral cell model.
///
/// The defaults are a calibrated set, not measured silicon values. They are
/// chosen so that 0.5 nA to 2 uA readout at the standard read point sits
/// strictly inside `[q_min, q_max]`, readout never recharges the cell, a
/// 2.7 V drain inhibits injection and a 2.7 V source inhibits tunneling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceParams {
    pub i_s0: f64,
    pub n_slope: f64,
    pub u_t: f64,
    pub v_th0: f64,
    pub kappa_cg: f64,
    pub kappa_d: f64,
    pub kappa_s: f64,
    pub i_max: f64,
    pub inj_rate0: f64,
    pub inj_slope: f64,
    pub inj_vmin: f64,
    pub inj_gate_lo: f64,
    pub inj_gate_hi: f64,
    pub tun_rate0: f64,
    pub tun_slope: f64,
    pub tun_vmin: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub noise_a: f64,
    pub noise_b: f64,
    pub variability_sigma: f64,
}

impl Default for DeviceParams {
    fn default() -> Self {
        DeviceParams {
            i_s0: 1e-13,
            n_slope: 1.5,
            u_t: 0.02585,
            v_th0: 0.9,
            kappa_cg: 0.60,
            kappa_d: 0.01,
            kappa_s: 0.20,
            i_max: 20e-6,
            inj_rate0: 1.5e-6,
            inj_slope: 0.15,
            inj_vmin: 4.0,
            inj_gate_lo: 1.0,
            inj_gate_hi: 2.2,
            tun_rate0: 1e-4,
            tun_slope: 0.02,
            tun_vmin: 2.1,
            q_min: -0.32,
            q_max: 0.06,
            noise_a: 5e-4,
            noise_b: 8e-3,
            variability_sigma: 0.01,
        }
    }
}

impl DeviceParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.i_s0,
            self.n_slope,
            self.u_t,
            self.v_th0,
            self.kappa_cg,
            self.kappa_d,
            self.kappa_s,
            self.i_max,
            self.inj_rate0,
            self.inj_slope,
            self.inj_vmin,
            self.inj_gate_lo,
            self.inj_gate_hi,
            self.tun_rate0,
            self.tun_slope,
            self.tun_vmin,
            self.q_min,
            self.q_max,
            self.noise_a,
            self.noise_b,
            self.variability_sigma,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(SimError::InvalidParams("non-finite field".into()));
        }
        let kappas = [self.kappa_cg, self.kappa_d, self.kappa_s];
        if kappas.iter().any(|k| *k < 0.0) || kappas.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(SimError::InvalidParams(
                "coupling coefficients must be >= 0 and sum to <= 1".into(),
            ));
        }
        if !(self.i_s0 > 0.0 && self.n_slope >= 1.0 && self.u_t > 0.0 && self.i_max > self.i_s0) {
            return Err(SimError::InvalidParams(
                "need i_s0 > 0, n_slope >= 1, u_t > 0, i_max > i_s0".into(),
            ));
        }
        if !(self.inj_slope > 0.0 && self.tun_slope > 0.0 && self.q_min < self.q_max) {
            return Err(SimError::InvalidParams(
                "need inj_slope > 0, tun_slope > 0, q_min < q_max".into(),
            ));
        }
        if self.inj_rate0 < 0.0 || self.tun_rate0 < 0.0 || self.inj_gate_lo > self.inj_gate_hi {
            return Err(SimError::InvalidParams(
                "bad injection/tunneling rate parameters".into(),
            ));
        }
        if self.noise_a < 0.0 || self.noise_b < 0.0 || self.variability_sigma < 0.0 {
            return Err(SimError::InvalidParams(
                "noise and variability must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Subthreshold voltage scale `n * U_T`.
    pub fn slope_voltage(&self) -> f64 {
        self.n_slope * self.u_t
    }

    /// Charge-offset change that moves readout current by one decade.
    pub fn decade_q(&self) -> f64 {
        self.slope_voltage() * std::f64::consts::LN_10
    }

    /// Relative readout noise for a `window`-long average at current `i`.
    pub fn noise_sigma(&self, i: f64, window: f64) -> f64 {
        if i <= 0.0 {
            return 0.0;
        }
        (self.noise_a + self.noise_b * (NOISE_REFERENCE_A / i).sqrt())
            / (window / REFERENCE_WINDOW_S).sqrt()
    }
}

/// Charge-induced floating-gate offset plus the cell's own parameter draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub q: f64,
    pub params: DeviceParams,
}

/// What a pulse did to a cell.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateReport {
    /// Injection rate (V/s), lowers `q`.
    pub r_inj: f64,
    /// Tunneling rate (V/s), raises `q`.
    pub r_tun: f64,
    pub delta_q: f64,
    pub clamped: bool,
}

fn capped_exp(x: f64) -> f64 {
    x.min(MAX_EXPONENT).exp()
}

impl CellState {
    /// Fully erased cell.
    pub fn erased(params: DeviceParams) -> Self {
        CellState {
            q: params.q_max,
            params,
        }
    }

    /// Fully programmed cell.
    pub fn programmed(params: DeviceParams) -> Self {
        CellState {
            q: params.q_min,
            params,
        }
    }

    pub fn with_q(params: DeviceParams, q: f64) -> Self {
        CellState {
            q: q.clamp(params.q_min, params.q_max),
            params,
        }
    }

    pub fn fg_potential(&self, b: &TerminalBiases) -> Result<f64> {
        b.validate()?;
        Ok(self.fg_potential_unchecked(b))
    }

    fn fg_potential_unchecked(&self, b: &TerminalBiases) -> f64 {
        let p = &self.params;
        p.kappa_cg * b.v_g + p.kappa_d * b.v_d + p.kappa_s * b.v_s + self.q
    }

    /// Noise-free forward readout current.
    pub fn read_current(&self, b: &TerminalBiases) -> Result<f64> {
        let v_fg = self.fg_potential(b)?;
        let v_ds = b.v_d - b.v_s;
        if v_ds < 0.0 {
            return Err(SimError::Unsupported(format!(
                "reverse drain-source bias {v_ds} V"
            )));
        }
        let p = &self.params;
        let channel = p.i_s0 * capped_exp((v_fg - p.v_th0) / p.slope_voltage());
        let drain_factor = -(-v_ds / p.u_t).exp_m1();
        Ok((channel * drain_factor).min(p.i_max))
    }

    /// Injection and tunneling rates at the pulse's biases.
    pub fn rates(&self, b: &TerminalBiases) -> Result<(f64, f64)> {
        let v_fg = self.fg_potential(b)?;
        let p = &self.params;
        let v_sd = b.v_s - b.v_d;
        let r_inj = if v_sd > p.inj_vmin && (p.inj_gate_lo..=p.inj_gate_hi).contains(&b.v_g) {
            p.inj_rate0 * capped_exp((v_sd - p.inj_vmin) / p.inj_slope)
        } else {
            0.0
        };
        let v_ox = b.v_g - v_fg;
        let r_tun = if v_ox > p.tun_vmin {
            p.tun_rate0 * capped_exp((v_ox - p.tun_vmin) / p.tun_slope)
        } else {
            0.0
        };
        Ok((r_inj, r_tun))
    }

    /// Apply one pulse. Rates are evaluated at the pre-pulse state; the new
    /// charge is clamped into `[q_min, q_max]` and clamping is reported.
    pub fn pulse_update(&self, pulse: &Pulse) -> Result<(CellState, UpdateReport)> {
        pulse.validate()?;
        let (r_inj, r_tun) = self.rates(&pulse.biases)?;
        let p = &self.params;
        let raw = self.q - r_inj * pulse.duration + r_tun * pulse.duration;
        let q = raw.clamp(p.q_min, p.q_max);
        let next = CellState { q, params: *p };
        let report = UpdateReport {
            r_inj,
            r_tun,
            delta_q: q - self.q,
            clamped: raw != q,
        };
        Ok((next, report))
    }

    /// Window-averaged readout with multiplicative Gaussian noise.
    pub fn sample_readout<R: Rng + ?Sized>(
        &self,
        b: &TerminalBiases,
        window: f64,
        rng: &mut R,
    ) -> Result<f64> {
        if !(window > 0.0 && window.is_finite()) {
            return Err(SimError::range("read window", window, 0.0, f64::INFINITY));
        }
        let i = self.read_current(b)?;
        let sigma = self.params.noise_sigma(i, window);
        // always draw so the stream position does not depend on the state
        let eps: f64 = StandardNormal.sample(rng);
        if sigma == 0.0 {
            return Ok(i);
        }
        Ok((i * (1.0 + sigma * eps)).max(0.0))
    }
}

/// Analytic inverse of [`CellState::read_current`].
pub fn state_for_current(
    target: f64,
    biases: &TerminalBiases,
    params: &DeviceParams,
) -> Result<CellState> {
    biases.validate()?;
    if !(target > 0.0 && target < params.i_max) {
        return Err(SimError::range("target current", target, 0.0, params.i_max));
    }
    let v_ds = biases.v_d - biases.v_s;
    if v_ds <= 0.0 {
        return Err(SimError::Unsupported(format!(
            "no forward current at drain-source bias {v_ds} V"
        )));
    }
    let drain_factor = -(-v_ds / params.u_t).exp_m1();
    let divider =
        params.kappa_cg * biases.v_g + params.kappa_d * biases.v_d + params.kappa_s * biases.v_s;
    let q = params.v_th0 - divider
        + params.slope_voltage() * (target / (params.i_s0 * drain_factor)).ln();
    if !(params.q_min..=params.q_max).contains(&q) {
        return Err(SimError::range(
            "charge offset for target",
            q,
            params.q_min,
            params.q_max,
        ));
    }
    Ok(CellState { q, params: *params })
}

/// Achievable readout window `[I(q_min), I(q_max)]` at the given biases.
pub fn current_range(params: &DeviceParams, biases: &TerminalBiases) -> Result<(f64, f64)> {
    let lo = CellState::programmed(*params).read_current(biases)?;
    let hi = CellState::erased(*params).read_current(biases)?;
    Ok((lo, hi))
}

/// Mean-one lognormal factor with relative standard deviation `sigma`.
fn lognormal_factor<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    let s2 = (1.0 + sigma * sigma).ln();
    // sigma validated finite and >= 0, so the distribution is well-formed
    let dist = LogNormal::new(-0.5 * s2, s2.sqrt()).expect("finite lognormal parameters");
    dist.sample(rng)
}

/// Per-cell Monte Carlo draw around `params`, starting fully erased.
///
/// Perturbed: `i_s0`, `n_slope` (floored at 1), `v_th0`, the three couplings
/// (renormalized to keep their sum) and both rate prefactors. Always consumes
/// the same number of random values so cell streams stay aligned.
pub fn draw_cell<R: Rng + ?Sized>(params: &DeviceParams, rng: &mut R) -> CellState {
    let sigma = params.variability_sigma;
    let mut f = [0.0; 8];
    for x in f.iter_mut() {
        *x = lognormal_factor(sigma, rng);
    }
    if sigma == 0.0 {
        return CellState::erased(*params);
    }
    let mut p = *params;
    p.i_s0 *= f[0];
    p.n_slope = (p.n_slope * f[1]).max(1.0);
    p.v_th0 *= f[2];
    let k_sum = p.kappa_cg + p.kappa_d + p.kappa_s;
    let (cg, d, s) = (p.kappa_cg * f[3], p.kappa_d * f[4], p.kappa_s * f[5]);
    let scale = if cg + d + s > 0.0 {
        k_sum / (cg + d + s)
    } else {
        1.0
    };
    p.kappa_cg = cg * scale;
    p.kappa_d = d * scale;
    p.kappa_s = s * scale;
    p.inj_rate0 *= f[6];
    p.tun_rate0 *= f[7];
    CellState::erased(p)
}
