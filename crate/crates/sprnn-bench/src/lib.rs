//! Deterministic workload builders shared by the criterion benchmarks, so
//! numbers are comparable across machines and runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sprnn_core::{
    prune_dense, ActivationBatch, BiasTerm, CellKind, DenseMatrix, PruneStrategy, SparseLayer,
    WarpSchedule,
};

/// Square random matrix with entries scaled so row dot products stay O(1)
/// at the benchmark densities.
pub fn random_dense(hidden: usize, density: f64, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (density * hidden as f64).sqrt() as f32;
    DenseMatrix::from_fn(hidden, hidden, |_, _| rng.gen_range(-scale..scale))
        .expect("benchmark shapes are valid")
}

/// Row-balanced pruned layer with padded rows, ready for scheduling.
pub fn pruned_layer(hidden: usize, density: f64, seed: u64) -> SparseLayer {
    let dense = random_dense(hidden, density, seed);
    let mut layer = prune_dense(&dense, PruneStrategy::RowBalanced, density)
        .expect("benchmark densities are valid");
    layer.pad_rows();
    layer
}

/// One-row-per-warp schedule matching `layer`.
pub fn schedule_for(layer: &SparseLayer) -> WarpSchedule {
    let pairs = layer.pairs_per_row().expect("benchmark layers are padded");
    WarpSchedule::new(
        CellKind::Rnn,
        layer.rows(),
        pairs,
        CellKind::Rnn.default_lanes_per_row(),
    )
    .expect("benchmark schedules are valid")
}

/// Seeded initial state plus one broadcast bias per step.
pub fn run_inputs(
    hidden: usize,
    batch: usize,
    steps: usize,
    seed: u64,
) -> (ActivationBatch, Vec<BiasTerm>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h0 = ActivationBatch::new(
        hidden,
        batch,
        (0..hidden * batch).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )
    .expect("benchmark shapes are valid");
    let biases = (0..steps)
        .map(|_| {
            BiasTerm::broadcast((0..hidden).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .expect("benchmark shapes are valid")
        })
        .collect();
    (h0, biases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builders_are_deterministic() {
        let a = pruned_layer(128, 0.1, 9);
        let b = pruned_layer(128, 0.1, 9);
        assert_eq!(a.rows(), 128);
        assert_eq!(a.pairs_per_row(), Some(13));
        for r in 0..a.rows() {
            assert_eq!(a.row_pairs(r), b.row_pairs(r));
        }
        let (h0, biases) = run_inputs(128, 4, 3, 5);
        assert_eq!(h0.data().len(), 512);
        assert_eq!(biases.len(), 3);
        schedule_for(&a).matches_layer(&a).expect("schedule fits");
    }
}
