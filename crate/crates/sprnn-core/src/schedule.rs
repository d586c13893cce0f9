//! Warp scheduling: which rows a warp serves and which pair positions each
//! lane visits at each step.
//!
//! Positions are assigned to lanes with a stride of 32 across the warp's
//! flattened (position, row) slot space. With the bank-aware row layout,
//! the 32 slots touched at one step then fall in 32 consecutive position
//! residues, which is exactly the pattern the per-row coloring staggers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparseLayer;

/// Lanes in one warp.
pub const LANES_PER_WARP: usize = 32;

/// Shared-memory banks; a warp load serializes when distinct addresses in
/// one load map to the same bank.
pub const SHM_BANKS: usize = 32;

/// Recurrent cell family the schedule serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Rnn,
    Lstm,
}

impl CellKind {
    /// Rows of the weight matrix for a hidden size of `hidden`: the LSTM
    /// stacks four gate blocks.
    pub fn matrix_rows(self, hidden: usize) -> usize {
        match self {
            CellKind::Rnn => hidden,
            CellKind::Lstm => 4 * hidden,
        }
    }

    /// Default lane split: a full warp per RNN row; 8 lanes per gate row for
    /// the LSTM so one warp covers at least one whole unit (4 gate rows).
    pub fn default_lanes_per_row(self) -> usize {
        match self {
            CellKind::Rnn => 32,
            CellKind::Lstm => 8,
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" => Ok(CellKind::Rnn),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::parameter(format!(
                "unknown cell kind '{other}' (expected rnn|lstm)"
            ))),
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Rnn => "rnn",
            CellKind::Lstm => "lstm",
        })
    }
}

/// One lane's assignment: the matrix row it serves and the ordered pair
/// positions it loads, one per step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaneAssignment {
    row: usize,
    positions: Vec<usize>,
}

impl LaneAssignment {
    pub fn row(&self) -> usize {
        self.row
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// The position this lane loads at `step`, or None when the lane is
    /// inert at that step.
    pub fn position_at(&self, step: usize) -> Option<usize> {
        self.positions.get(step).copied()
    }
}

/// One warp: 32 lane slots; None marks a lane with no row (short last warp).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Warp {
    lanes: [Option<LaneAssignment>; LANES_PER_WARP],
}

impl Warp {
    pub fn lane(&self, l: usize) -> Option<&LaneAssignment> {
        self.lanes[l].as_ref()
    }

    pub fn lanes(&self) -> impl Iterator<Item = (usize, &LaneAssignment)> {
        self.lanes
            .iter()
            .enumerate()
            .filter_map(|(l, a)| a.as_ref().map(|a| (l, a)))
    }

    /// Matrix rows this warp serves, in row-group order.
    pub fn rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.lanes().map(|(_, a)| a.row).collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }
}

/// Maps every padded pair position of every row onto exactly one
/// (warp, lane, step) slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarpSchedule {
    cell: CellKind,
    hidden: usize,
    rows: usize,
    pairs_per_row: usize,
    lanes_per_row: usize,
    steps: usize,
    warps: Vec<Warp>,
}

impl WarpSchedule {
    /// Builds the schedule for a `hidden`-unit cell whose padded rows hold
    /// `pairs_per_row` pairs each, with `lanes_per_row` lanes sharing a row.
    ///
    /// `lanes_per_row` must divide 32. The LSTM additionally requires at
    /// most 8 lanes per row so each warp holds whole units (the four gate
    /// rows of a unit stay in one warp and are listed consecutively).
    pub fn new(
        cell: CellKind,
        hidden: usize,
        pairs_per_row: usize,
        lanes_per_row: usize,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::parameter("hidden size must be at least 1".to_string()));
        }
        if pairs_per_row == 0 {
            return Err(Error::parameter(
                "schedule needs at least 1 pair per row".to_string(),
            ));
        }
        if lanes_per_row == 0 || !LANES_PER_WARP.is_multiple_of(lanes_per_row) {
            return Err(Error::parameter(format!(
                "lanes_per_row must divide {LANES_PER_WARP}, got {lanes_per_row}"
            )));
        }
        if cell == CellKind::Lstm && lanes_per_row > 8 {
            return Err(Error::parameter(format!(
                "lstm schedules need lanes_per_row <= 8 so a warp holds whole \
                 units, got {lanes_per_row}"
            )));
        }

        let rows = cell.matrix_rows(hidden);
        let rows_per_warp = LANES_PER_WARP / lanes_per_row;
        // Row visit order: natural for the RNN; unit-major for the LSTM so
        // the four gate rows of unit u (u, H+u, 2H+u, 3H+u) sit together.
        let row_list: Vec<usize> = match cell {
            CellKind::Rnn => (0..rows).collect(),
            CellKind::Lstm => (0..hidden)
                .flat_map(|u| (0..4).map(move |g| g * hidden + u))
                .collect(),
        };

        let n = pairs_per_row;
        let warp_count = row_list.len().div_ceil(rows_per_warp);
        let mut warps = Vec::with_capacity(warp_count);
        for wi in 0..warp_count {
            let base = wi * rows_per_warp;
            let mut lanes: [Option<LaneAssignment>; LANES_PER_WARP] =
                std::array::from_fn(|_| None);
            for (l, lane) in lanes.iter_mut().enumerate() {
                let group_entry = l % rows_per_warp;
                let Some(&row) = row_list.get(base + group_entry) else {
                    continue;
                };
                // Lane l owns flattened slots l, l+32, l+64, ... of the
                // warp's position-major slot space (slot = p*G + entry).
                let mut positions = Vec::new();
                let mut slot = l;
                while slot < n * rows_per_warp {
                    positions.push(slot / rows_per_warp);
                    slot += LANES_PER_WARP;
                }
                // A lane past the slot space does no work; mark it inert
                // rather than assigning a row with nothing to load.
                if !positions.is_empty() {
                    *lane = Some(LaneAssignment { row, positions });
                }
            }
            warps.push(Warp { lanes });
        }

        Ok(WarpSchedule {
            cell,
            hidden,
            rows,
            pairs_per_row,
            lanes_per_row,
            steps: (n * rows_per_warp).div_ceil(LANES_PER_WARP),
            warps,
        })
    }

    /// Schedule for an existing padded layer. RNN layers must be square;
    /// LSTM layers must have 4 gate rows per column.
    pub fn for_layer(cell: CellKind, layer: &SparseLayer, lanes_per_row: usize) -> Result<Self> {
        let hidden = layer.cols();
        if layer.rows() != cell.matrix_rows(hidden) {
            return Err(Error::ScheduleMismatch(format!(
                "{cell} over {hidden} columns needs {} rows, layer has {}",
                cell.matrix_rows(hidden),
                layer.rows()
            )));
        }
        let Some(n) = layer.pairs_per_row() else {
            return Err(Error::ScheduleMismatch(
                "layer rows are ragged; pad_rows before scheduling".to_string(),
            ));
        };
        WarpSchedule::new(cell, hidden, n, lanes_per_row)
    }

    /// Confirms the schedule describes exactly this layer's shape.
    pub fn matches_layer(&self, layer: &SparseLayer) -> Result<()> {
        if layer.rows() != self.rows || layer.cols() != self.hidden {
            return Err(Error::ScheduleMismatch(format!(
                "schedule built for a {}x{} {} layer, got {}x{}",
                self.rows,
                self.hidden,
                self.cell,
                layer.rows(),
                layer.cols()
            )));
        }
        match layer.pairs_per_row() {
            Some(n) if n == self.pairs_per_row => Ok(()),
            Some(n) => Err(Error::ScheduleMismatch(format!(
                "schedule covers {} pairs per row, layer has {n}",
                self.pairs_per_row
            ))),
            None => Err(Error::ScheduleMismatch(
                "layer rows are ragged; pad_rows before scheduling".to_string(),
            )),
        }
    }

    pub fn cell(&self) -> CellKind {
        self.cell
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn pairs_per_row(&self) -> usize {
        self.pairs_per_row
    }

    pub fn lanes_per_row(&self) -> usize {
        self.lanes_per_row
    }

    pub fn rows_per_warp(&self) -> usize {
        LANES_PER_WARP / self.lanes_per_row
    }

    /// Operate steps per timestep (loads each lane issues).
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn warp_count(&self) -> usize {
        self.warps.len()
    }

    pub fn warp(&self, i: usize) -> &Warp {
        &self.warps[i]
    }

    pub fn warps(&self) -> &[Warp] {
        &self.warps
    }
}
