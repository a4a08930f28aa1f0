//! Behavioral simulator of a NOR-flash floating-gate array modified for
//! individual analog cell tuning.
//!
//! - [`device`]: single-cell model (divider, subthreshold readout, injection
//!   and tunneling rate laws, noisy averaged readout, variability draws)
//! - [`array`]: supercell topologies, bias maps, half-select classes
//! - [`tuning`]: write-verify controller and sequential tuning
//! - [`vmm`]: gate-coupled four-quadrant vector-by-matrix multiplier
//! - [`harness`]: experiment configuration, orchestration and output

// NaN-rejecting range checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod array;
pub mod device;
pub mod error;
pub mod harness;
pub mod tuning;
pub mod vmm;

pub use error::{Result, SimError};
