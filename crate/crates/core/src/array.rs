//! Supercell array: line sharing for both gate routings, per-cell bias maps
//! for program/erase/read, half-select classification and whole-array pulses.
//!
//! Rows pair into supercells: rows `2k` and `2k + 1` share one source line.
//! Bit lines run along columns. In the original routing the gate (word) line
//! runs along a row; in the modified routing gate lines run along columns,
//! two per column (one per supercell half), so the two cells of a supercell
//! never share a gate line.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::device::{draw_cell, CellState, DeviceParams, Pulse, TerminalBiases, UpdateReport};
use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingVariant {
    Original,
    Modified,
}

impl fmt::Display for RoutingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingVariant::Original => "original",
            RoutingVariant::Modified => "modified",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellAddr {
    pub row: usize,
    pub col: usize,
}

impl CellAddr {
    pub const fn new(row: usize, col: usize) -> Self {
        CellAddr { row, col }
    }
}

impl fmt::Display for CellAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// Which physical lines a cell's three terminals sit on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LineAssignment {
    pub gate_line: usize,
    pub source_line: usize,
    pub bit_line: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayTopology {
    pub rows: usize,
    pub cols: usize,
    pub routing: RoutingVariant,
}

impl Default for ArrayTopology {
    /// 2x2 supercell fragment.
    fn default() -> Self {
        ArrayTopology {
            rows: 4,
            cols: 2,
            routing: RoutingVariant::Modified,
        }
    }
}

impl ArrayTopology {
    pub fn new(rows: usize, cols: usize, routing: RoutingVariant) -> Result<Self> {
        let t = ArrayTopology {
            rows,
            cols,
            routing,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 || !self.rows.is_multiple_of(2) {
            return Err(SimError::InvalidParams(format!(
                "array must have an even number of rows >= 2 and >= 2 columns, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check(&self, cell: CellAddr) -> Result<()> {
        if cell.row >= self.rows || cell.col >= self.cols {
            return Err(SimError::BadCoordinate {
                row: cell.row,
                col: cell.col,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }

    pub fn cells(&self) -> impl Iterator<Item = CellAddr> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| CellAddr::new(r, c)))
    }

    pub fn lines(&self, cell: CellAddr) -> Result<LineAssignment> {
        self.check(cell)?;
        let gate_line = match self.routing {
            RoutingVariant::Original => cell.row,
            RoutingVariant::Modified => 2 * cell.col + cell.row % 2,
        };
        Ok(LineAssignment {
            gate_line,
            source_line: cell.row / 2,
            bit_line: cell.col,
        })
    }

    pub fn classify(&self, op: OpKind, selected: CellAddr, cell: CellAddr) -> Result<CellClass> {
        let sel = self.lines(selected)?;
        let this = self.lines(cell)?;
        if cell == selected {
            return Ok(CellClass::Selected);
        }
        let same_gate = sel.gate_line == this.gate_line;
        let same_source = sel.source_line == this.source_line;
        let class = match (op, self.routing) {
            (OpKind::Program, RoutingVariant::Original) => {
                if same_gate {
                    CellClass::HalfA
                } else if same_source {
                    CellClass::HalfB
                } else {
                    CellClass::Unselected
                }
            }
            (OpKind::Program, RoutingVariant::Modified) => {
                if same_source {
                    CellClass::HalfB
                } else if same_gate {
                    CellClass::HalfD
                } else {
                    CellClass::Unselected
                }
            }
            (OpKind::Erase, RoutingVariant::Original) if same_gate => CellClass::HalfC,
            (OpKind::Erase, RoutingVariant::Modified) if same_gate => CellClass::HalfE,
            _ => CellClass::Unselected,
        };
        Ok(class)
    }

    /// Per-cell terminal voltages for one operation on `selected`.
    ///
    /// Voltages are assigned per line, then read off per cell, so cells
    /// sharing a line always carry the same voltage on that terminal.
    pub fn bias_map(
        &self,
        op: Operation,
        selected: CellAddr,
        protocol: &BiasProtocol,
    ) -> Result<Grid<TerminalBiases>> {
        let sel = self.lines(selected)?;
        let (g_sel, g_other, s_sel, s_other, d_sel, d_other) = match op {
            Operation::Program { amplitude } => {
                protocol.program.check_amplitude(amplitude)?;
                let p = &protocol.program;
                let g_unsel = match self.routing {
                    RoutingVariant::Original => p.v_g_unsel_original,
                    RoutingVariant::Modified => p.v_g_unsel_modified,
                };
                (
                    p.v_g_sel,
                    g_unsel,
                    amplitude,
                    p.v_s_unsel,
                    p.v_d_sel,
                    p.v_d_inhibit,
                )
            }
            Operation::Erase { amplitude } => {
                protocol.erase.check_amplitude(amplitude)?;
                let e = &protocol.erase;
                (
                    amplitude,
                    e.v_g_unsel,
                    e.v_s_sel,
                    e.v_s_unsel,
                    e.v_d_sel,
                    e.v_d_unsel,
                )
            }
            Operation::Read => {
                let r = &protocol.read;
                (r.v_g, 0.0, r.v_s, 0.0, r.v_d, 0.0)
            }
        };
        let mut data = Vec::with_capacity(self.len());
        for cell in self.cells() {
            let l = self.lines(cell)?;
            let b = TerminalBiases {
                v_g: if l.gate_line == sel.gate_line {
                    g_sel
                } else {
                    g_other
                },
                v_d: if l.bit_line == sel.bit_line {
                    d_sel
                } else {
                    d_other
                },
                v_s: if l.source_line == sel.source_line {
                    s_sel
                } else {
                    s_other
                },
            };
            b.validate()?;
            data.push(b);
        }
        Ok(Grid {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Program,
    Erase,
    Read,
}

/// An operation with its pulsed amplitude (source for program, gate for erase).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Operation {
    Program { amplitude: f64 },
    Erase { amplitude: f64 },
    Read,
}

impl Operation {
    pub fn kind(&self) -> OpKind {
        match self {
            Operation::Program { .. } => OpKind::Program,
            Operation::Erase { .. } => OpKind::Erase,
            Operation::Read => OpKind::Read,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellClass {
    Selected,
    HalfA,
    HalfB,
    HalfC,
    HalfD,
    HalfE,
    Unselected,
}

impl fmt::Display for CellClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellClass::Selected => "selected",
            CellClass::HalfA => "A",
            CellClass::HalfB => "B",
            CellClass::HalfC => "C",
            CellClass::HalfD => "D",
            CellClass::HalfE => "E",
            CellClass::Unselected => "unselected",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProgramBiases {
    pub v_g_sel: f64,
    pub v_g_unsel_original: f64,
    pub v_g_unsel_modified: f64,
    pub v_s_unsel: f64,
    pub v_d_sel: f64,
    pub v_d_inhibit: f64,
    /// Admissible source pulse amplitude range.
    pub amplitude_min: f64,
    pub amplitude_max: f64,
}

impl Default for ProgramBiases {
    fn default() -> Self {
        ProgramBiases {
            v_g_sel: 1.6,
            v_g_unsel_original: 0.0,
            v_g_unsel_modified: -1.0,
            v_s_unsel: 0.0,
            v_d_sel: 0.0,
            v_d_inhibit: 2.7,
            amplitude_min: 0.0,
            amplitude_max: 9.0,
        }
    }
}

impl ProgramBiases {
    fn check_amplitude(&self, a: f64) -> Result<()> {
        if !(self.amplitude_min..=self.amplitude_max).contains(&a) {
            return Err(SimError::range(
                "program amplitude",
                a,
                self.amplitude_min,
                self.amplitude_max,
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EraseBiases {
    pub v_g_unsel: f64,
    pub v_s_sel: f64,
    pub v_s_unsel: f64,
    /// Bit line of the selected cell.
    pub v_d_sel: f64,
    /// All other bit lines.
    pub v_d_unsel: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
}

impl Default for EraseBiases {
    fn default() -> Self {
        EraseBiases {
            v_g_unsel: 0.0,
            v_s_sel: 0.0,
            v_s_unsel: 2.7,
            v_d_sel: 2.7,
            v_d_unsel: 2.7,
            amplitude_min: 0.0,
            amplitude_max: 10.0,
        }
    }
}

impl EraseBiases {
    fn check_amplitude(&self, a: f64) -> Result<()> {
        if !(self.amplitude_min..=self.amplitude_max).contains(&a) {
            return Err(SimError::range(
                "erase amplitude",
                a,
                self.amplitude_min,
                self.amplitude_max,
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReadBiases {
    pub v_g: f64,
    pub v_d: f64,
    pub v_s: f64,
}

impl Default for ReadBiases {
    fn default() -> Self {
        let b = crate::device::READ_BIASES;
        ReadBiases {
            v_g: b.v_g,
            v_d: b.v_d,
            v_s: b.v_s,
        }
    }
}

impl ReadBiases {
    pub fn biases(&self) -> TerminalBiases {
        TerminalBiases {
            v_g: self.v_g,
            v_d: self.v_d,
            v_s: self.v_s,
        }
    }
}

/// Named role voltages for program, erase and read.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasProtocol {
    pub program: ProgramBiases,
    pub erase: EraseBiases,
    pub read: ReadBiases,
}

impl BiasProtocol {
    pub fn validate(&self) -> Result<()> {
        let p = &self.program;
        let e = &self.erase;
        let r = &self.read;
        let fixed = [
            p.v_g_sel,
            p.v_g_unsel_original,
            p.v_g_unsel_modified,
            p.v_s_unsel,
            p.v_d_sel,
            p.v_d_inhibit,
            p.amplitude_min,
            p.amplitude_max,
            e.v_g_unsel,
            e.v_s_sel,
            e.v_s_unsel,
            e.v_d_sel,
            e.v_d_unsel,
            e.amplitude_min,
            e.amplitude_max,
        ];
        for v in fixed {
            TerminalBiases::new(v, 0.0, 0.0)?;
        }
        TerminalBiases::new(r.v_g, r.v_d, r.v_s)?;
        if p.amplitude_min > p.amplitude_max || e.amplitude_min > e.amplitude_max {
            return Err(SimError::InvalidParams("empty amplitude range".into()));
        }
        Ok(())
    }
}

/// Row-major 2-D grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T> Grid<T> {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(CellAddr) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(CellAddr::new(r, c)));
            }
        }
        Grid { rows, cols, data }
    }

    pub fn get(&self, cell: CellAddr) -> &T {
        &self.data[cell.row * self.cols + cell.col]
    }

    pub fn get_mut(&mut self, cell: CellAddr) -> &mut T {
        &mut self.data[cell.row * self.cols + cell.col]
    }

    pub fn iter(&self) -> impl Iterator<Item = (CellAddr, &T)> {
        let cols = self.cols;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, v)| (CellAddr::new(i / cols, i % cols), v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayState {
    pub topology: ArrayTopology,
    pub cells: Grid<CellState>,
}

impl ArrayState {
    /// Every cell a copy of `cell`.
    pub fn uniform(topology: ArrayTopology, cell: CellState) -> Result<Self> {
        topology.validate()?;
        cell.params.validate()?;
        Ok(ArrayState {
            topology,
            cells: Grid::from_fn(topology.rows, topology.cols, |_| cell),
        })
    }

    /// Independent per-cell parameter draws, row-major, all fully erased.
    pub fn draw<R: Rng + ?Sized>(
        topology: ArrayTopology,
        params: &DeviceParams,
        rng: &mut R,
    ) -> Result<Self> {
        topology.validate()?;
        params.validate()?;
        Ok(ArrayState {
            topology,
            cells: Grid::from_fn(topology.rows, topology.cols, |_| draw_cell(params, rng)),
        })
    }

    pub fn cell(&self, addr: CellAddr) -> Result<&CellState> {
        self.topology.check(addr)?;
        Ok(self.cells.get(addr))
    }

    pub fn cell_mut(&mut self, addr: CellAddr) -> Result<&mut CellState> {
        self.topology.check(addr)?;
        Ok(self.cells.get_mut(addr))
    }

    /// Every cell sees its mapped biases for `duration`.
    pub fn apply_array_pulse(
        &self,
        biases: &Grid<TerminalBiases>,
        duration: f64,
    ) -> Result<(ArrayState, Grid<UpdateReport>)> {
        let mut next = self.clone();
        let reports = next.apply_pulse_in_place(biases, duration)?;
        Ok((next, reports))
    }

    pub fn apply_pulse_in_place(
        &mut self,
        biases: &Grid<TerminalBiases>,
        duration: f64,
    ) -> Result<Grid<UpdateReport>> {
        if biases.rows != self.topology.rows || biases.cols != self.topology.cols {
            return Err(SimError::ShapeMismatch {
                expected_rows: self.topology.rows,
                expected_cols: self.topology.cols,
                rows: biases.rows,
                cols: biases.cols,
            });
        }
        // validate everything first so a failure leaves the array untouched
        let pulses = biases
            .data
            .iter()
            .map(|b| Pulse::new(*b, duration))
            .collect::<Result<Vec<_>>>()?;
        let mut reports = Vec::with_capacity(pulses.len());
        for (cell, pulse) in self.cells.data.iter_mut().zip(&pulses) {
            let (n, rep) = cell.pulse_update(pulse)?;
            *cell = n;
            reports.push(rep);
        }
        Ok(Grid {
            rows: biases.rows,
            cols: biases.cols,
            data: reports,
        })
    }

    /// Apply one operation on `selected` across the whole array.
    pub fn apply_operation(
        &mut self,
        op: Operation,
        selected: CellAddr,
        protocol: &BiasProtocol,
        duration: f64,
    ) -> Result<Grid<UpdateReport>> {
        let map = self.topology.bias_map(op, selected, protocol)?;
        self.apply_pulse_in_place(&map, duration)
    }

    /// Averaged noisy readout of one cell at the protocol's read point.
    pub fn read_cell<R: Rng + ?Sized>(
        &self,
        addr: CellAddr,
        protocol: &BiasProtocol,
        window: f64,
        rng: &mut R,
    ) -> Result<f64> {
        let map = self.topology.bias_map(Operation::Read, addr, protocol)?;
        self.cell(addr)?.sample_readout(map.get(addr), window, rng)
    }

    /// Noise-free readout of one cell at the protocol's read point.
    pub fn read_cell_exact(&self, addr: CellAddr, protocol: &BiasProtocol) -> Result<f64> {
        self.cell(addr)?.read_current(&protocol.read.biases())
    }

    /// Noise-free readout of every cell.
    pub fn read_all_exact(&self, protocol: &BiasProtocol) -> Result<Grid<f64>> {
        let b = protocol.read.biases();
        let data = self
            .cells
            .data
            .iter()
            .map(|c| c.read_current(&b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Grid {
            rows: self.topology.rows,
            cols: self.topology.cols,
            data,
        })
    }

    pub fn snapshot(&self, seed: Option<u64>) -> Snapshot {
        Snapshot {
            seed,
            topology: self.topology,
            cells: self.cells.clone(),
        }
    }
}

/// Serializable array snapshot for resume and golden files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub seed: Option<u64>,
    pub topology: ArrayTopology,
    pub cells: Grid<CellState>,
}

impl Snapshot {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Snapshot = serde_json::from_str(text)
            .map_err(|e| SimError::InvalidParams(format!("snapshot: {e}")))?;
        s.topology.validate()?;
        if s.cells.rows != s.topology.rows
            || s.cells.cols != s.topology.cols
            || s.cells.data.len() != s.topology.len()
        {
            return Err(SimError::ShapeMismatch {
                expected_rows: s.topology.rows,
                expected_cols: s.topology.cols,
                rows: s.cells.rows,
                cols: s.cells.cols,
            });
        }
        Ok(s)
    }

    pub fn into_state(self) -> ArrayState {
        ArrayState {
            topology: self.topology,
            cells: self.cells,
        }
    }
}
