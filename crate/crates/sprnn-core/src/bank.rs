//! Shared-memory bank-conflict model for the operate stage.
//!
//! Activations are stored batch-interleaved: with vector width w, activation
//! j occupies words w*j .. w*j+w-1, so a w-wide load lands on bank
//! (w*j) mod 32. A warp-wide w-load is served as w sequential groups of
//! 32/w lanes in lane order; within a group, distinct addresses on one bank
//! serialize while identical indices broadcast in a single access.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{WarpSchedule, LANES_PER_WARP, SHM_BANKS};
use crate::sparse::{LayoutKind, SparseLayer};

/// One warp-wide load: each lane's activation index, or None when the lane
/// issues nothing.
pub type WarpLoad = [Option<u32>; LANES_PER_WARP];

/// Bank hit by a w-wide load of activation `index`.
pub fn bank_of(index: u32, w: u8) -> u32 {
    ((w as u64 * index as u64) % SHM_BANKS as u64) as u32
}

fn check_width(w: u8) -> Result<()> {
    if matches!(w, 1 | 2 | 4) {
        Ok(())
    } else {
        Err(Error::parameter(format!(
            "vector width must be 1, 2, or 4, got {w}"
        )))
    }
}

/// Cycle count of one load instruction against its conflict-free floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadCost {
    /// Cycles the load takes under the serialization rule.
    pub actual: u64,
    /// Cycles with zero conflicts: one per group that has any active lane.
    pub ideal: u64,
}

impl LoadCost {
    pub fn excess(self) -> u64 {
        self.actual - self.ideal
    }

    fn add(self, other: LoadCost) -> LoadCost {
        LoadCost {
            actual: self.actual + other.actual,
            ideal: self.ideal + other.ideal,
        }
    }
}

/// Cycles one group of lanes takes: the maximum, over banks, of the number
/// of DISTINCT indices the group throws at that bank.
fn group_cycles(lanes: &[Option<u32>], w: u8) -> LoadCost {
    let mut distinct: [Vec<u32>; SHM_BANKS] = std::array::from_fn(|_| Vec::new());
    let mut any = false;
    for idx in lanes.iter().flatten() {
        any = true;
        let b = bank_of(*idx, w) as usize;
        if !distinct[b].contains(idx) {
            distinct[b].push(*idx);
        }
    }
    LoadCost {
        actual: distinct.iter().map(|d| d.len() as u64).max().unwrap_or(0),
        ideal: u64::from(any),
    }
}

/// Cost of one w-wide warp load: w sequential groups of 32/w lanes in lane
/// order. Inert lanes cost nothing; a group with no active lane is free.
pub fn load_cycles(load: &WarpLoad, w: u8) -> Result<LoadCost> {
    check_width(w)?;
    let group_size = LANES_PER_WARP / w as usize;
    let mut total = LoadCost { actual: 0, ideal: 0 };
    for g in 0..w as usize {
        total = total.add(group_cycles(&load[g * group_size..(g + 1) * group_size], w));
    }
    Ok(total)
}

/// Cost of moving the same data without the wide load: w sequential scalar
/// passes over the identical interleaved storage (pass p loads word
/// w*index+p across all 32 lanes). Every pass has the same conflict pattern,
/// so the total is w times one full-warp pass at bank (w*index) mod 32.
pub fn scalar_equivalent_cycles(load: &WarpLoad, w: u8) -> Result<LoadCost> {
    check_width(w)?;
    let one_pass = group_cycles(load, w);
    Ok(LoadCost {
        actual: one_pass.actual * w as u64,
        ideal: one_pass.ideal * w as u64,
    })
}

/// Conflict totals of one operate pass (one timestep) of a scheduled layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub rows: usize,
    pub cols: usize,
    pub pairs_per_row: usize,
    pub lanes_per_row: usize,
    pub layout: LayoutKind,
    /// Stored real weights over rows*cols (padding excluded).
    pub density: f64,
    pub vector_width: u8,
    pub total_load_instructions: u64,
    pub ideal_cycles: u64,
    pub actual_cycles: u64,
    /// (actual - ideal) / ideal; 0 when there are no loads.
    pub penalty: f64,
    /// Actual cycles per step, summed over warps.
    pub per_step_actual: Vec<u64>,
}

/// Sums `load_cycles` over every (warp, step) load of one timestep.
/// Deterministic: warps are folded with integer sums, so processing order
/// cannot change any total.
pub fn simulate_layer(
    schedule: &WarpSchedule,
    layer: &SparseLayer,
    w: u8,
) -> Result<ConflictReport> {
    check_width(w)?;
    schedule.matches_layer(layer)?;

    let steps = schedule.steps();
    let zero = || (0u64, 0u64, 0u64, vec![0u64; steps]);
    let (instructions, ideal, actual, per_step) = schedule
        .warps()
        .par_iter()
        .map(|warp| {
            let mut acc = zero();
            for step in 0..steps {
                let mut load: WarpLoad = [None; LANES_PER_WARP];
                for (l, lane) in warp.lanes() {
                    if let Some(pos) = lane.position_at(step) {
                        load[l] = Some(layer.row_pairs(lane.row())[pos].index);
                    }
                }
                let cost = load_cycles(&load, w).expect("width already validated");
                if cost.ideal > 0 {
                    acc.0 += 1;
                    acc.1 += cost.ideal;
                    acc.2 += cost.actual;
                    acc.3[step] += cost.actual;
                }
            }
            acc
        })
        .reduce(zero, |mut a, b| {
            a.0 += b.0;
            a.1 += b.1;
            a.2 += b.2;
            for (x, y) in a.3.iter_mut().zip(&b.3) {
                *x += y;
            }
            a
        });

    let penalty = if ideal == 0 {
        0.0
    } else {
        (actual - ideal) as f64 / ideal as f64
    };
    Ok(ConflictReport {
        rows: layer.rows(),
        cols: layer.cols(),
        pairs_per_row: schedule.pairs_per_row(),
        lanes_per_row: schedule.lanes_per_row(),
        layout: layer.layout(),
        density: layer.stored_weights() as f64 / (layer.rows() * layer.cols()) as f64,
        vector_width: w,
        total_load_instructions: instructions,
        ideal_cycles: ideal,
        actual_cycles: actual,
        penalty,
        per_step_actual: per_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::DenseMatrix;
    use crate::layout::optimize_row;
    use crate::schedule::CellKind;
    use crate::sparse::{prune_dense, IndexValuePair, PruneStrategy};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn warp_of(indices: &[u32]) -> WarpLoad {
        let mut load: WarpLoad = [None; 32];
        for (l, &i) in indices.iter().enumerate() {
            load[l] = Some(i);
        }
        load
    }

    #[test]
    fn bank_mapping_examples() {
        assert_eq!(bank_of(0, 1), 0);
        assert_eq!(bank_of(33, 1), 1);
        assert_eq!(bank_of(9, 4), 4);
        // No overflow on extreme indices.
        assert_eq!(bank_of(u32::MAX, 4), ((4u64 * u32::MAX as u64) % 32) as u32);
    }

    #[test]
    fn distinct_banks_cost_one_cycle() {
        let load = warp_of(&(0..32).collect::<Vec<_>>());
        let c = load_cycles(&load, 1).unwrap();
        assert_eq!((c.actual, c.ideal), (1, 1));
    }

    #[test]
    fn broadcast_costs_one_cycle() {
        let load = warp_of(&[7; 32]);
        let c = load_cycles(&load, 1).unwrap();
        assert_eq!((c.actual, c.ideal), (1, 1));
    }

    #[test]
    fn same_bank_distinct_addresses_fully_serialize() {
        let load = warp_of(&(0..32).map(|l| 32 * l).collect::<Vec<_>>());
        let c = load_cycles(&load, 1).unwrap();
        assert_eq!((c.actual, c.ideal), (32, 1));
    }

    #[test]
    fn max_over_banks_not_sum() {
        // Banks: {0, 0, 1}: bank 0 serializes twice, bank 1 rides along.
        let load = warp_of(&[0, 32, 1]);
        let c = load_cycles(&load, 1).unwrap();
        assert_eq!((c.actual, c.ideal), (2, 1));
    }

    #[test]
    fn wide_group_collision_example() {
        // Lanes 0 and 1 hold indices 0 and 8; at w=4 both land on bank 0
        // (words 0 and 32), so the first 8-lane group costs 2 cycles.
        let load = warp_of(&[0, 8]);
        let c = load_cycles(&load, 4).unwrap();
        assert_eq!((c.actual, c.ideal), (2, 1));
    }

    #[test]
    fn inert_lanes_and_groups_are_free() {
        let load: WarpLoad = [None; 32];
        let c = load_cycles(&load, 4).unwrap();
        assert_eq!((c.actual, c.ideal), (0, 0));

        let mut one: WarpLoad = [None; 32];
        one[31] = Some(5);
        let c = load_cycles(&one, 4).unwrap();
        // Only the last group is active.
        assert_eq!((c.actual, c.ideal), (1, 1));
    }

    #[test]
    fn wide_broadcast_within_groups() {
        let load = warp_of(&[3; 32]);
        let c = load_cycles(&load, 4).unwrap();
        assert_eq!((c.actual, c.ideal), (4, 4));
    }

    #[test]
    fn invalid_width_rejected() {
        let load = warp_of(&[0]);
        assert!(load_cycles(&load, 3).is_err());
        assert!(load_cycles(&load, 0).is_err());
        assert!(scalar_equivalent_cycles(&load, 8).is_err());
    }

    #[test]
    fn scalar_equivalent_multiplies_one_pass() {
        let load = warp_of(&[0, 8]);
        // One scalar pass over the w=4 interleaved storage: both on bank 0,
        // 2 cycles; four passes total.
        let c = scalar_equivalent_cycles(&load, 4).unwrap();
        assert_eq!((c.actual, c.ideal), (8, 4));
    }

    #[test]
    fn stride_eight_warp_obeys_structural_bound_only() {
        // Indices 0,8,16,...,56 on the first 8 lanes. At w=4 the whole
        // group collapses onto bank 0: excess 7. A same-width-storage
        // scalar pass also collapses onto bank 0 (8 distinct): excess 7 per
        // pass, 28 over 4 passes. The wide load wins (7 <= 28), which is
        // the modeled guarantee. Note the naive cross-storage comparison
        // (w=1 banks index mod 32: four banks, 2 distinct each, excess 1)
        // would be violated here: 7/4 > 1. The model compares equal
        // storage, not equal index arithmetic.
        let load = warp_of(&(0..8).map(|l| 8 * l).collect::<Vec<_>>());
        let wide = load_cycles(&load, 4).unwrap();
        assert_eq!((wide.actual, wide.ideal), (8, 1));
        let scalar = scalar_equivalent_cycles(&load, 4).unwrap();
        assert_eq!(scalar.excess(), 28);
        assert!(wide.excess() <= scalar.excess());

        let narrow = load_cycles(&load, 1).unwrap();
        assert_eq!(narrow.excess(), 1);
        assert!(wide.excess() > 4 * narrow.excess());
    }

    fn dense_layer(rows: usize, cols: usize) -> SparseLayer {
        let m = DenseMatrix::from_fn(rows, cols, |r, c| (r * cols + c) as f32 + 1.0).unwrap();
        prune_dense(&m, PruneStrategy::RowBalanced, 1.0).unwrap()
    }

    #[test]
    fn dense_reuse_pattern_has_zero_penalty() {
        // 32 rows, one lane each: at step s every lane loads column s, a
        // pure broadcast; the persistent dense pattern is conflict-free.
        let layer = dense_layer(32, 32);
        let schedule = WarpSchedule::for_layer(CellKind::Rnn, &layer, 1).unwrap();
        let report = simulate_layer(&schedule, &layer, 1).unwrap();
        assert_eq!(report.total_load_instructions, 32);
        assert_eq!(report.ideal_cycles, 32);
        assert_eq!(report.actual_cycles, 32);
        assert_eq!(report.penalty, 0.0);
        assert_eq!(report.per_step_actual, vec![1; 32]);
    }

    #[test]
    fn stride_32_rows_hit_full_serialization() {
        // Every row holds indices {0, 32, ..., 992}: all on bank 0 at w=1.
        // Single-row warps then serialize all 32 lanes every step.
        let rows: Vec<Vec<IndexValuePair>> = (0..1024)
            .map(|_| (0..32).map(|l| IndexValuePair::new(32 * l, 1.0)).collect())
            .collect();
        let layer = SparseLayer::from_rows(1024, rows).unwrap();
        let schedule = WarpSchedule::for_layer(CellKind::Rnn, &layer, 32).unwrap();
        let report = simulate_layer(&schedule, &layer, 1).unwrap();
        assert_eq!(report.total_load_instructions, 1024);
        assert_eq!(report.ideal_cycles, 1024);
        assert_eq!(report.actual_cycles, 32 * 1024);
        assert_eq!(report.penalty, 31.0);
    }

    #[test]
    fn bank_aware_row_reaches_ideal() {
        // Every row holds one index per bank (0..31). After bank-aware
        // reordering, single-row warps touch 32 distinct banks at every
        // step, so the simulation lands exactly on the ideal count.
        let rows: Vec<Vec<IndexValuePair>> = (0..32)
            .map(|x| {
                let row: Vec<IndexValuePair> =
                    (0..32u32).map(|i| IndexValuePair::new(i, 1.0)).collect();
                optimize_row(&row, x)
            })
            .collect();
        let layer = SparseLayer::from_rows(32, rows).unwrap();
        let schedule = WarpSchedule::for_layer(CellKind::Rnn, &layer, 32).unwrap();
        // One warp per row (single-row warps): zero penalty by coloring.
        let report = simulate_layer(&schedule, &layer, 1).unwrap();
        assert_eq!(report.actual_cycles, report.ideal_cycles);
        assert_eq!(report.penalty, 0.0);
    }

    #[test]
    fn schedule_layer_mismatch_is_an_error() {
        let layer = dense_layer(8, 8);
        let schedule = WarpSchedule::new(CellKind::Rnn, 8, 99, 32).unwrap();
        assert!(matches!(
            simulate_layer(&schedule, &layer, 1),
            Err(Error::ScheduleMismatch(_))
        ));
    }

    #[test]
    fn report_carries_shape_and_density() {
        let m = DenseMatrix::from_fn(32, 32, |r, c| ((r * 31 + c * 7) % 97) as f32 + 1.0)
            .unwrap();
        let layer = prune_dense(&m, PruneStrategy::RowBalanced, 0.25).unwrap();
        let schedule = WarpSchedule::for_layer(CellKind::Rnn, &layer, 4).unwrap();
        let report = simulate_layer(&schedule, &layer, 2).unwrap();
        assert_eq!(report.rows, 32);
        assert_eq!(report.cols, 32);
        assert_eq!(report.pairs_per_row, 8);
        assert_eq!(report.lanes_per_row, 4);
        assert_eq!(report.vector_width, 2);
        assert_eq!(report.density, 0.25);
        assert_eq!(report.per_step_actual.len(), schedule.steps());
        assert_eq!(
            report.per_step_actual.iter().sum::<u64>(),
            report.actual_cycles
        );
        assert!(report.actual_cycles >= report.ideal_cycles);
    }

    proptest! {
        // The wide load never loses to the scalar passes it replaces, for
        // any index assignment and any width: per-sample conflict cycles
        // of one w-wide load <= those of w scalar passes.
        #[test]
        fn wide_load_never_beats_scalar_baseline(
            w in prop::sample::select(vec![2u8, 4]),
            lanes in proptest::collection::vec(
                proptest::option::weighted(0.9, 0u32..64),
                32,
            ),
        ) {
            let load: WarpLoad = lanes.try_into().unwrap();
            let wide = load_cycles(&load, w).unwrap();
            let scalar = scalar_equivalent_cycles(&load, w).unwrap();
            prop_assert!(wide.excess() <= scalar.excess());
            prop_assert!(wide.actual <= scalar.actual);
        }

        // Padding a layer by one position never reduces total cycles: old
        // (warp, step, lane) assignments are preserved and padding only
        // adds loads.
        #[test]
        fn extra_padding_never_reduces_cycles(
            hidden in prop::sample::select(vec![8usize, 16, 32]),
            lanes_pow in 0u32..6,
            density in 10usize..=90,
            w in prop::sample::select(vec![1u8, 2, 4]),
            seed in any::<u64>(),
        ) {
            let lanes = 1usize << lanes_pow;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> =
                (0..hidden * hidden).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let m = DenseMatrix::new(hidden, hidden, data).unwrap();
            let mut layer =
                prune_dense(&m, PruneStrategy::RowBalanced, density as f64 / 100.0).unwrap();
            layer.pad_rows();
            let n = layer.pairs_per_row().unwrap();
            let before = simulate_layer(
                &WarpSchedule::for_layer(CellKind::Rnn, &layer, lanes).unwrap(),
                &layer,
                w,
            )
            .unwrap();
            let mut padded = layer.clone();
            padded.pad_to(n + 1).unwrap();
            let after = simulate_layer(
                &WarpSchedule::for_layer(CellKind::Rnn, &padded, lanes).unwrap(),
                &padded,
                w,
            )
            .unwrap();
            prop_assert!(after.actual_cycles >= before.actual_cycles);
            prop_assert!(after.total_load_instructions >= before.total_load_instructions);
        }
    }
}
