//! Seeded input synthesis. Every matrix, state, and bias the CLI fabricates
//! comes from one ChaCha8 stream keyed by the user's `--seed`, drawn in a
//! fixed order, so reruns are bit-identical across machines.

use clap::ValueEnum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sprnn_core::{ActivationBatch, BiasTerm, DenseMatrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dist {
    /// Uniform on [-1, 1).
    Uniform,
    /// Standard normal.
    Normal,
}

impl Dist {
    pub fn label(self) -> &'static str {
        match self {
            Dist::Uniform => "uniform[-1,1)",
            Dist::Normal => "standard-normal",
        }
    }
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-major fill from the stream.
pub fn dense_matrix(
    rows: usize,
    cols: usize,
    dist: Dist,
    rng: &mut ChaCha8Rng,
) -> Result<DenseMatrix> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(draw(dist, rng));
    }
    DenseMatrix::new(rows, cols, data)
}

/// Initial activation state, uniform on [-1, 1), element order.
pub fn activation_state(hidden: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<ActivationBatch> {
    let data = (0..hidden * batch).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    ActivationBatch::new(hidden, batch, data)
}

/// One broadcast bias per timestep, rows values each, uniform on [-1, 1).
pub fn broadcast_biases(rows: usize, steps: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BiasTerm>> {
    (0..steps)
        .map(|_| BiasTerm::broadcast((0..rows).map(|_| rng.gen_range(-1.0f32..1.0)).collect()))
        .collect()
}

fn draw(dist: Dist, rng: &mut ChaCha8Rng) -> f32 {
    match dist {
        Dist::Uniform => rng.gen_range(-1.0f32..1.0),
        Dist::Normal => rng.sample(StandardNormal),
    }
}
