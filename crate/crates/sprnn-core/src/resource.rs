//! Device feasibility and qualitative timestep cost.
//!
//! The feasibility side answers one question: do the weights fit the
//! register files and do the staged activations fit a block's shared
//! memory? Persistent kernels die on exactly those two budgets. The cost
//! side combines a conflict report with per-stage constants into a single
//! comparable number; it predicts orderings, not wall-clock time.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::ConflictReport;
use crate::error::{Error, Result};
use crate::exec::SyncMode;
use crate::sparse::keep_count;

/// Fraction of the device's total registers a persistent kernel can
/// actually dedicate to weights. Real kernels spend the rest on indices,
/// accumulators, and control state, so these are calibration constants
/// tuned to reproduce observed layer-size limits, not measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegisterFractions {
    pub dense_persistent: f64,
    pub sparse_persistent: f64,
}

/// Per-stage cycle constants for `estimate_timestep_cost`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostConstants {
    /// Cycles per activation word moved in the load stage.
    pub load_per_word: f64,
    /// Cycles per lane combined in the per-row reduce.
    pub reduce_per_lane: f64,
    /// Flat cost of a device-wide barrier per timestep.
    pub barrier_sync: f64,
    /// Flat cost of sentinel-polling handoff per timestep.
    pub lamport_sync: f64,
}

/// Device constants the models run against. Registers are counted in
/// 32-bit words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchProfile {
    pub name: String,
    pub sm_count: usize,
    pub registers_per_sm: usize,
    pub max_registers_per_thread: usize,
    pub shared_mem_bytes_per_block: usize,
    pub banks: usize,
    pub usable_register_fraction: RegisterFractions,
    pub cost: CostConstants,
}

impl ArchProfile {
    /// Tesla V100: 80 SMs, 64K registers each, 96KB opt-in shared memory
    /// per block. The register fractions are calibrated so the known
    /// dense (1792) and sparse (5632 at 10% infeasible, 5760 at 1%
    /// feasible) layer-size boundaries fall out exactly.
    pub fn v100() -> Self {
        ArchProfile {
            name: "v100".to_string(),
            sm_count: 80,
            registers_per_sm: 65_536,
            max_registers_per_thread: 256,
            shared_mem_bytes_per_block: 98_304,
            banks: 32,
            usable_register_fraction: RegisterFractions {
                dense_persistent: 0.65,
                sparse_persistent: 0.80,
            },
            cost: CostConstants {
                load_per_word: 1.0,
                reduce_per_lane: 8.0,
                barrier_sync: 1200.0,
                lamport_sync: 300.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::parameter("profile name must not be empty"));
        }
        for (what, v) in [
            ("sm_count", self.sm_count),
            ("registers_per_sm", self.registers_per_sm),
            ("max_registers_per_thread", self.max_registers_per_thread),
            ("shared_mem_bytes_per_block", self.shared_mem_bytes_per_block),
            ("banks", self.banks),
        ] {
            if v == 0 {
                return Err(Error::parameter(format!("{what} must be positive")));
            }
        }
        for (what, f) in [
            (
                "usable_register_fraction.dense_persistent",
                self.usable_register_fraction.dense_persistent,
            ),
            (
                "usable_register_fraction.sparse_persistent",
                self.usable_register_fraction.sparse_persistent,
            ),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::parameter(format!("{what} must be in (0, 1], got {f}")));
            }
        }
        for (what, c) in [
            ("cost.load_per_word", self.cost.load_per_word),
            ("cost.reduce_per_lane", self.cost.reduce_per_lane),
            ("cost.barrier_sync", self.cost.barrier_sync),
            ("cost.lamport_sync", self.cost.lamport_sync),
        ] {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::parameter(format!(
                    "{what} must be finite and non-negative, got {c}"
                )));
            }
        }
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let profile: ArchProfile = serde_json::from_str(&text)
            .map_err(|e| Error::corrupt(format!("arch profile does not parse: {e}")))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::corrupt(format!("arch profile does not serialize: {e}")))?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// Register words across the whole device.
    pub fn total_registers(&self) -> usize {
        self.sm_count * self.registers_per_sm
    }

    /// Register words an algorithm may spend on weights. GEMM variants
    /// stream weights from memory, so their budget is the full file (their
    /// requirement is zero anyway).
    pub fn register_budget(&self, algorithm: Algorithm) -> usize {
        let fraction = match algorithm {
            Algorithm::DensePersistent => self.usable_register_fraction.dense_persistent,
            Algorithm::SparsePersistent => self.usable_register_fraction.sparse_persistent,
            Algorithm::DenseGemm | Algorithm::SparseGemm => 1.0,
        };
        (self.total_registers() as f64 * fraction).floor() as usize
    }
}

/// Execution strategies the feasibility model compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    DenseGemm,
    SparseGemm,
    DensePersistent,
    SparsePersistent,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::DenseGemm,
        Algorithm::SparseGemm,
        Algorithm::DensePersistent,
        Algorithm::SparsePersistent,
    ];

    fn is_persistent(self) -> bool {
        matches!(self, Algorithm::DensePersistent | Algorithm::SparsePersistent)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dense-gemm" => Ok(Algorithm::DenseGemm),
            "sparse-gemm" => Ok(Algorithm::SparseGemm),
            "dense-persistent" => Ok(Algorithm::DensePersistent),
            "sparse-persistent" => Ok(Algorithm::SparsePersistent),
            other => Err(Error::parameter(format!(
                "unknown algorithm '{other}' (expected dense-gemm|sparse-gemm|\
                 dense-persistent|sparse-persistent)"
            ))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::DenseGemm => "dense-gemm",
            Algorithm::SparseGemm => "sparse-gemm",
            Algorithm::DensePersistent => "dense-persistent",
            Algorithm::SparsePersistent => "sparse-persistent",
        })
    }
}

/// The problem a kernel would have to fit on the device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadShape {
    pub hidden: usize,
    pub density: f64,
    pub batch: usize,
    pub vector_width: u8,
    pub sync_mode: SyncMode,
    /// What-if switch: pack column indices in 16 bits, halving their
    /// register cost. Off by default; no shipped kernel does this.
    pub index16: bool,
}

/// Which budget ran out first; register pressure is reported in
/// preference to shared memory when both are exceeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LimitingResource {
    Registers,
    SharedMemory,
    None,
}

/// One algorithm's fit against one device, with the raw quantities so
/// reports can show how close the call was.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeasibilityVerdict {
    pub algorithm: Algorithm,
    pub feasible: bool,
    pub limiting_resource: LimitingResource,
    pub registers_required: usize,
    pub registers_available: usize,
    pub shared_mem_required: usize,
    pub shared_mem_available: usize,
}

/// Bytes of block shared memory for staged activations: `vector_width`
/// batch samples per activation word group, 4 bytes each, doubled by the
/// Lamport mode's two in-flight timestep buffers.
pub fn shared_mem_required(hidden: usize, vector_width: u8, sync_mode: SyncMode) -> usize {
    let buffers = match sync_mode {
        SyncMode::GlobalBarrier => 1,
        SyncMode::Lamport => 2,
    };
    hidden * vector_width as usize * 4 * buffers
}

/// Register words holding the weights. Sparse persistent pays two words
/// per kept <index, value> pair (one each); dense persistent one word per
/// matrix element; GEMM variants keep no weights resident.
pub fn registers_required(
    algorithm: Algorithm,
    hidden: usize,
    density: f64,
    index16: bool,
) -> Result<usize> {
    match algorithm {
        Algorithm::DenseGemm | Algorithm::SparseGemm => Ok(0),
        Algorithm::DensePersistent => Ok(hidden * hidden),
        Algorithm::SparsePersistent => {
            if !(density > 0.0 && density <= 1.0) {
                return Err(Error::parameter(format!(
                    "density must be in (0, 1], got {density}"
                )));
            }
            let pairs = keep_count(density, hidden * hidden);
            Ok(if index16 {
                pairs + pairs.div_ceil(2)
            } else {
                2 * pairs
            })
        }
    }
}

/// Checks one algorithm against the profile's usable budgets and names
/// the binding resource.
pub fn check_feasibility(
    arch: &ArchProfile,
    algorithm: Algorithm,
    shape: &WorkloadShape,
) -> Result<FeasibilityVerdict> {
    arch.validate()?;
    if shape.hidden == 0 {
        return Err(Error::parameter("hidden size must be at least 1"));
    }
    if !matches!(shape.vector_width, 1 | 2 | 4) {
        return Err(Error::parameter(format!(
            "vector width must be 1, 2, or 4, got {}",
            shape.vector_width
        )));
    }
    let registers_required =
        registers_required(algorithm, shape.hidden, shape.density, shape.index16)?;
    let registers_available = arch.register_budget(algorithm);
    let shared_mem_required = if algorithm.is_persistent() {
        shared_mem_required(shape.hidden, shape.vector_width, shape.sync_mode)
    } else {
        0
    };
    let shared_mem_available = arch.shared_mem_bytes_per_block;

    let over_registers = registers_required > registers_available;
    let over_shared = shared_mem_required > shared_mem_available;
    let limiting_resource = if over_registers {
        LimitingResource::Registers
    } else if over_shared {
        LimitingResource::SharedMemory
    } else {
        LimitingResource::None
    };
    Ok(FeasibilityVerdict {
        algorithm,
        feasible: !over_registers && !over_shared,
        limiting_resource,
        registers_required,
        registers_available,
        shared_mem_required,
        shared_mem_available,
    })
}

/// Per-stage cycle estimate of one timestep. A qualitative model: it
/// preserves orderings (denser is never cheaper, fewer conflicts never
/// cost more, the cheaper sync constant wins) and nothing else.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub load: f64,
    pub operate: f64,
    pub reduce: f64,
    pub sync: f64,
    pub total: f64,
}

/// Combines a conflict report with the profile's constants: the load
/// stage moves hidden*batch words, the operate stage replays the
/// simulated conflict cycles, the reduce stage combines each row's lane
/// partials, and the sync stage is a flat per-mode constant. Load and
/// operate spread across the device's SMs.
pub fn estimate_timestep_cost(
    report: &ConflictReport,
    batch: usize,
    arch: &ArchProfile,
    sync_mode: SyncMode,
) -> CostBreakdown {
    let sms = arch.sm_count as f64;
    let load = report.cols as f64 * batch as f64 * arch.cost.load_per_word / sms;
    let operate = report.actual_cycles as f64 / sms;
    let reduce = arch.cost.reduce_per_lane * report.lanes_per_row as f64;
    let sync = match sync_mode {
        SyncMode::GlobalBarrier => arch.cost.barrier_sync,
        SyncMode::Lamport => arch.cost.lamport_sync,
    };
    CostBreakdown {
        load,
        operate,
        reduce,
        sync,
        total: load + operate + reduce + sync,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::DenseMatrix;
    use crate::schedule::{CellKind, WarpSchedule};
    use crate::sparse::{prune_dense, PruneStrategy};
    use proptest::prelude::*;

    fn shape(hidden: usize, density: f64, w: u8, sync: SyncMode) -> WorkloadShape {
        WorkloadShape {
            hidden,
            density,
            batch: w as usize,
            vector_width: w,
            sync_mode: sync,
            index16: false,
        }
    }

    #[test]
    fn shared_memory_formula_matches_hand_values() {
        assert_eq!(shared_mem_required(11_520, 1, SyncMode::Lamport), 92_160);
        assert_eq!(shared_mem_required(11_520, 2, SyncMode::Lamport), 184_320);
        assert_eq!(shared_mem_required(11_520, 1, SyncMode::GlobalBarrier), 46_080);
        assert_eq!(shared_mem_required(0, 4, SyncMode::Lamport), 0);
        // Barrier mode halves the bytes, so the largest layer that fits a
        // 96KB block doubles from 12288 to 24576.
        let budget = ArchProfile::v100().shared_mem_bytes_per_block;
        assert!(shared_mem_required(12_288, 1, SyncMode::Lamport) <= budget);
        assert!(shared_mem_required(12_289, 1, SyncMode::Lamport) > budget);
        assert!(shared_mem_required(24_576, 1, SyncMode::GlobalBarrier) <= budget);
        assert!(shared_mem_required(24_577, 1, SyncMode::GlobalBarrier) > budget);
        assert_eq!(
            2 * shared_mem_required(640, 2, SyncMode::GlobalBarrier),
            shared_mem_required(640, 2, SyncMode::Lamport)
        );
    }

    #[test]
    fn register_formulas_match_hand_values() {
        assert_eq!(
            registers_required(Algorithm::DensePersistent, 1792, 1.0, false).unwrap(),
            3_211_264
        );
        assert_eq!(
            registers_required(Algorithm::DensePersistent, 2304, 1.0, false).unwrap(),
            5_308_416
        );
        // ceil(0.1 * 5632^2) = 3,171,943 pairs, two words each.
        assert_eq!(
            registers_required(Algorithm::SparsePersistent, 5632, 0.10, false).unwrap(),
            6_343_886
        );
        assert_eq!(
            registers_required(Algorithm::SparsePersistent, 5760, 0.01, false).unwrap(),
            663_552
        );
        assert_eq!(registers_required(Algorithm::DenseGemm, 4096, 1.0, false).unwrap(), 0);
        assert_eq!(registers_required(Algorithm::SparseGemm, 4096, 0.1, false).unwrap(), 0);
        // Full density costs twice the dense layout: value plus index.
        assert_eq!(
            registers_required(Algorithm::SparsePersistent, 64, 1.0, false).unwrap(),
            2 * 64 * 64
        );
        assert!(registers_required(Algorithm::SparsePersistent, 64, 0.0, false).is_err());
        assert!(registers_required(Algorithm::SparsePersistent, 64, 1.5, false).is_err());
    }

    #[test]
    fn sixteen_bit_indices_cost_three_halves_per_pair() {
        let full = registers_required(Algorithm::SparsePersistent, 128, 0.1, false).unwrap();
        let packed = registers_required(Algorithm::SparsePersistent, 128, 0.1, true).unwrap();
        let pairs = full / 2;
        assert_eq!(packed, pairs + pairs.div_ceil(2));
        assert!(packed < full);
    }

    #[test]
    fn v100_dense_boundary_sits_between_1792_and_2304() {
        let arch = ArchProfile::v100();
        let ok = check_feasibility(
            &arch,
            Algorithm::DensePersistent,
            &shape(1792, 1.0, 1, SyncMode::Lamport),
        )
        .unwrap();
        assert!(ok.feasible);
        assert_eq!(ok.limiting_resource, LimitingResource::None);
        assert_eq!(ok.registers_required, 3_211_264);
        assert_eq!(ok.registers_available, 3_407_872);

        for h in [2048, 2304] {
            let bad = check_feasibility(
                &arch,
                Algorithm::DensePersistent,
                &shape(h, 1.0, 1, SyncMode::Lamport),
            )
            .unwrap();
            assert!(!bad.feasible, "H={h}");
            assert_eq!(bad.limiting_resource, LimitingResource::Registers, "H={h}");
        }
    }

    #[test]
    fn v100_sparse_boundaries_match_reported_limits() {
        let arch = ArchProfile::v100();
        let dense10 = check_feasibility(
            &arch,
            Algorithm::SparsePersistent,
            &shape(5632, 0.10, 1, SyncMode::Lamport),
        )
        .unwrap();
        assert!(!dense10.feasible);
        assert_eq!(dense10.limiting_resource, LimitingResource::Registers);
        assert_eq!(dense10.registers_available, 4_194_304);

        let thin = check_feasibility(
            &arch,
            Algorithm::SparsePersistent,
            &shape(5760, 0.01, 1, SyncMode::Lamport),
        )
        .unwrap();
        assert!(thin.feasible);
        assert_eq!(thin.registers_required, 663_552);

        let max = check_feasibility(
            &arch,
            Algorithm::SparsePersistent,
            &shape(11_520, 0.01, 1, SyncMode::Lamport),
        )
        .unwrap();
        assert!(max.feasible);
        assert_eq!(max.shared_mem_required, 92_160);

        // One step wider and shared memory becomes the binding resource.
        let wide = check_feasibility(
            &arch,
            Algorithm::SparsePersistent,
            &shape(11_520, 0.01, 2, SyncMode::Lamport),
        )
        .unwrap();
        assert!(!wide.feasible);
        assert_eq!(wide.limiting_resource, LimitingResource::SharedMemory);
    }

    #[test]
    fn gemm_algorithms_are_always_feasible() {
        let arch = ArchProfile::v100();
        for algo in [Algorithm::DenseGemm, Algorithm::SparseGemm] {
            let v = check_feasibility(&arch, algo, &shape(1 << 16, 1.0, 4, SyncMode::Lamport))
                .unwrap();
            assert!(v.feasible, "{algo}");
            assert_eq!(v.limiting_resource, LimitingResource::None);
            assert_eq!(v.registers_required, 0);
            assert_eq!(v.shared_mem_required, 0);
        }
    }

    #[test]
    fn tiny_layers_fit_with_room_to_spare() {
        let arch = ArchProfile::v100();
        let v = check_feasibility(
            &arch,
            Algorithm::SparsePersistent,
            &shape(64, 0.10, 1, SyncMode::Lamport),
        )
        .unwrap();
        assert!(v.feasible);
        assert_eq!(v.limiting_resource, LimitingResource::None);
    }

    #[test]
    fn profile_json_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arch.json");
        let v100 = ArchProfile::v100();
        v100.save_json(&path).unwrap();
        let loaded = ArchProfile::load_json(&path).unwrap();
        assert_eq!(loaded, v100);

        let mut bad = v100.clone();
        bad.usable_register_fraction.dense_persistent = 1.5;
        assert!(bad.validate().is_err());
        bad.usable_register_fraction.dense_persistent = 0.65;
        bad.sm_count = 0;
        assert!(bad.validate().is_err());

        fs::write(&path, "{not json").unwrap();
        assert!(ArchProfile::load_json(&path).is_err());
    }

    #[test]
    fn shipped_v100_profile_matches_the_builtin() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../profiles/v100.json");
        let shipped = ArchProfile::load_json(path).unwrap();
        assert_eq!(shipped, ArchProfile::v100());
    }

    #[test]
    fn algorithm_strings_round_trip() {
        for algo in Algorithm::ALL {
            let parsed: Algorithm = algo.to_string().parse().unwrap();
            assert_eq!(parsed, algo);
        }
        assert!("vector".parse::<Algorithm>().is_err());
    }

    fn report_for(hidden: usize, density: f64, w: u8) -> ConflictReport {
        let m = DenseMatrix::from_fn(hidden, hidden, |r, c| {
            (((r * 37 + c * 11) % 91) as f32) / 7.0 + 0.01
        })
        .unwrap();
        let layer = prune_dense(&m, PruneStrategy::RowBalanced, density).unwrap();
        let schedule = WarpSchedule::for_layer(CellKind::Rnn, &layer, 32).unwrap();
        crate::bank::simulate_layer(&schedule, &layer, w).unwrap()
    }

    #[test]
    fn cost_orderings_hold_for_the_default_profile() {
        let arch = ArchProfile::v100();
        let sparse = report_for(64, 0.05, 1);
        let denser = report_for(64, 0.30, 1);

        let cheap = estimate_timestep_cost(&sparse, 4, &arch, SyncMode::Lamport);
        let costly = estimate_timestep_cost(&denser, 4, &arch, SyncMode::Lamport);
        assert!(cheap.total <= costly.total, "denser layer must not be cheaper");

        let barrier = estimate_timestep_cost(&sparse, 4, &arch, SyncMode::GlobalBarrier);
        assert!(cheap.total < barrier.total, "lamport constant is the smaller one");
        assert_eq!(cheap.load, barrier.load);
        assert_eq!(cheap.operate, barrier.operate);

        // Fewer conflict cycles at fixed everything else strictly lowers cost.
        let mut calmer = denser.clone();
        calmer.actual_cycles = calmer.ideal_cycles;
        let relaid = estimate_timestep_cost(&calmer, 4, &arch, SyncMode::Lamport);
        assert!(relaid.total < costly.total);

        let parts = estimate_timestep_cost(&sparse, 4, &arch, SyncMode::Lamport);
        assert!(
            (parts.load + parts.operate + parts.reduce + parts.sync - parts.total).abs()
                < 1e-12
        );
    }

    proptest! {
        // Feasibility is antitone in every workload dimension: shrinking
        // the layer, thinning the density, narrowing the load, or moving
        // Lamport -> barrier can never turn feasible into infeasible.
        #[test]
        fn feasibility_is_antitone(
            hidden in 1usize..8192,
            extra in 0usize..4096,
            density in 0.01f64..=1.0,
            thinner in 0.001f64..1.0,
            w_small in prop::sample::select(vec![1u8, 2]),
            algo in prop::sample::select(vec![
                Algorithm::DensePersistent,
                Algorithm::SparsePersistent,
            ]),
        ) {
            let arch = ArchProfile::v100();
            let big = shape(hidden + extra, density, 4, SyncMode::Lamport);
            let small = WorkloadShape {
                hidden,
                density: density * thinner,
                batch: w_small as usize,
                vector_width: w_small,
                sync_mode: SyncMode::GlobalBarrier,
                index16: false,
            };
            let big_v = check_feasibility(&arch, algo, &big).unwrap();
            let small_v = check_feasibility(&arch, algo, &small).unwrap();
            if big_v.feasible {
                prop_assert!(small_v.feasible);
            }
            prop_assert!(small_v.registers_required <= big_v.registers_required);
            prop_assert!(small_v.shared_mem_required <= big_v.shared_mem_required);
        }
    }
}
