//! Sparse persistent RNN/LSTM inference engine.
//!
//! The crate models the execution strategy of keeping a pruned recurrent
//! weight matrix resident in registers across timesteps: weights are stored
//! as <index, value> pairs, rows are padded to a uniform length, pair order
//! is rearranged to avoid shared-memory bank conflicts, and timestep
//! boundaries are crossed either with a barrier or with per-element
//! sentinel flags. Alongside the executor live a bank-conflict cost model
//! and a register/shared-memory feasibility model for sizing networks.

pub mod bank;
pub mod dense;
pub mod error;
pub mod exec;
pub mod io;
pub mod layout;
pub mod resource;
pub mod schedule;
pub mod sparse;
pub mod util;

pub use bank::{
    bank_of, load_cycles, scalar_equivalent_cycles, simulate_layer, ConflictReport, LoadCost,
    WarpLoad,
};
pub use dense::{
    lstm_step_dense, precompute_input, rnn_step_dense, run_lstm_sequence_dense,
    run_rnn_sequence_dense, ActivationBatch, ActivationFn, BiasTerm, DenseMatrix, MAX_BATCH,
};
pub use error::{Error, Result};
pub use exec::{
    Executor, RunConfig, RunOutput, RunStats, StepTrace, SyncMode, DEFAULT_POLL_BUDGET,
    SENTINEL_BITS,
};
pub use io::{load_dense, load_sparse, save_dense, save_sparse};
pub use layout::{optimize_layer, optimize_row};
pub use resource::{
    check_feasibility, estimate_timestep_cost, registers_required, shared_mem_required,
    Algorithm, ArchProfile, CostBreakdown, CostConstants, FeasibilityVerdict, LimitingResource,
    RegisterFractions, WorkloadShape,
};
pub use schedule::{CellKind, WarpSchedule, LANES_PER_WARP, SHM_BANKS};
pub use sparse::{prune_dense, IndexValuePair, LayoutKind, PruneStrategy, SparseLayer};
pub use util::{fnv1a64, fnv1a64_f32, max_rel_err};
