//! Multi-worker executor for the four-stage persistent pipeline:
//! load activations, operate on register-resident pairs, reduce lane
//! partials per row, synchronize across workers.
//!
//! Activations cross timesteps through shared word buffers. GlobalBarrier
//! mode reuses one buffer and fences each step with two barriers (everyone
//! staged, everyone published). Lamport mode alternates two buffers: the
//! destination is pre-filled with the bit pattern of -0.0 (the sentinel),
//! finished values are published with release stores, and consumers poll
//! each word until it stops being the sentinel. Published outputs are
//! canonicalized (-0.0 becomes +0.0) so the sentinel never aliases data.
//!
//! Determinism: every worker snapshots the full activation buffer before
//! computing, lane partials fold pair products in position order, and row
//! partials fold lanes in ascending lane id. Worker count, scheduling
//! delays, and sync mode therefore cannot change a single output bit.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dense::{ActivationBatch, ActivationFn, BiasTerm};
use crate::error::{Error, Result};
use crate::schedule::{CellKind, Warp, WarpSchedule};
use crate::sparse::SparseLayer;
use crate::util::fnv1a64_f32;

/// IEEE-754 bit pattern of -0.0: the reserved not-yet-published marker.
pub const SENTINEL_BITS: u32 = 0x8000_0000;

/// Default per-wait poll limit. Sized so tens of microseconds of injected
/// delay stay far below it while a genuine deadlock still trips in bounded
/// time.
pub const DEFAULT_POLL_BUDGET: u64 = 1_000_000;

/// How workers agree that a timestep's outputs are complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncMode {
    /// One activation buffer, two barriers per step.
    GlobalBarrier,
    /// Two alternating buffers, per-word sentinel polling, no barrier.
    Lamport,
}

impl std::str::FromStr for SyncMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "global-barrier" | "barrier" => Ok(SyncMode::GlobalBarrier),
            "lamport" => Ok(SyncMode::Lamport),
            other => Err(Error::parameter(format!(
                "unknown sync mode '{other}' (expected global-barrier|lamport)"
            ))),
        }
    }
}

impl std::fmt::Display for SyncMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SyncMode::GlobalBarrier => "global-barrier",
            SyncMode::Lamport => "lamport",
        })
    }
}

/// Deterministic fault injection for failure-path tests.
#[cfg(test)]
#[derive(Debug, Clone, Copy)]
pub(crate) enum Fault {
    Panic { worker: usize, step: usize },
    StallPublish { worker: usize, step: usize, millis: u64 },
}

/// Executor knobs. `vector_width` does not change any computed value on
/// this backend; it is validated and carried into the run statistics so
/// reports stay comparable with the conflict and resource models.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub sync_mode: SyncMode,
    pub workers: usize,
    pub vector_width: u8,
    /// Record per-step output checksums.
    pub trace: bool,
    /// In Lamport mode, opportunistically copy already-published words of
    /// the next timestep while finishing the current one.
    pub prefetch: bool,
    /// Maximum polls per wait before the run is declared stuck.
    pub poll_budget: u64,
    /// When set, workers insert pseudo-random sub-40us delays around the
    /// stage and publish phases to shake out ordering assumptions.
    pub chaos_seed: Option<u64>,
    #[cfg(test)]
    pub(crate) fault: Option<Fault>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sync_mode: SyncMode::Lamport,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            vector_width: 1,
            trace: false,
            prefetch: true,
            poll_budget: DEFAULT_POLL_BUDGET,
            chaos_seed: None,
            #[cfg(test)]
            fault: None,
        }
    }
}

/// Counters observed during one run.
#[derive(Debug, Clone, Serialize)]
pub struct RunStats {
    pub timesteps: usize,
    pub workers: usize,
    pub sync_mode: SyncMode,
    pub vector_width: u8,
    /// Words of shared activation buffering: hidden*batch under
    /// GlobalBarrier, twice that under Lamport's double buffer.
    pub activation_storage_words: usize,
    /// Total published output words; exactly hidden*batch per timestep.
    pub publishes: u64,
    /// Published results whose raw bits were -0.0 and were flipped to +0.0.
    pub canonicalized_writes: u64,
    /// Worst number of polls any single wait needed.
    pub max_polls: u64,
    /// Lamport-mode words obtained by prefetch instead of a stage-time poll.
    pub prefetched_words: u64,
}

/// Checksum of one timestep's full hidden state (FNV-1a over the word
/// values in element order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StepTrace {
    pub step: usize,
    pub checksum: u64,
}

/// Final state plus bookkeeping from a run.
#[derive(Debug)]
pub struct RunOutput {
    pub hidden: ActivationBatch,
    /// Final cell state; present for LSTM runs.
    pub cell: Option<ActivationBatch>,
    pub stats: RunStats,
    pub trace: Option<Vec<StepTrace>>,
}

fn canonical_bits(v: f32) -> u32 {
    let bits = v.to_bits();
    if bits == SENTINEL_BITS {
        0
    } else {
        bits
    }
}

/// Reusable barrier that can be torn down when a worker fails, so the
/// remaining workers return instead of waiting forever.
struct AbortableBarrier {
    parties: usize,
    state: Mutex<BarrierState>,
    cv: Condvar,
}

struct BarrierState {
    count: usize,
    generation: u64,
    aborted: bool,
}

impl AbortableBarrier {
    fn new(parties: usize) -> Self {
        AbortableBarrier {
            parties,
            state: Mutex::new(BarrierState {
                count: 0,
                generation: 0,
                aborted: false,
            }),
            cv: Condvar::new(),
        }
    }

    fn wait(&self) -> Result<()> {
        let mut s = self.state.lock().expect("barrier lock");
        if s.aborted {
            return Err(Error::Aborted);
        }
        s.count += 1;
        if s.count == self.parties {
            s.count = 0;
            s.generation += 1;
            self.cv.notify_all();
            return Ok(());
        }
        let gen = s.generation;
        while s.generation == gen && !s.aborted {
            s = self.cv.wait(s).expect("barrier wait");
        }
        if s.aborted {
            Err(Error::Aborted)
        } else {
            Ok(())
        }
    }

    fn abort(&self) {
        let mut s = self.state.lock().expect("barrier lock");
        s.aborted = true;
        self.cv.notify_all();
    }
}

fn xorshift64star(state: &mut u64) -> u64 {
    let mut x = *state;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    *state = x;
    x.wrapping_mul(0x2545_F491_4F6C_DD1D)
}

fn chaos_pause(state: &mut u64) {
    let ns = xorshift64star(state) % 40_000;
    let start = Instant::now();
    while (start.elapsed().as_nanos() as u64) < ns {
        std::hint::spin_loop();
    }
}

/// Contiguous warp range owned by worker `k` of `workers`.
fn warp_partition(warp_count: usize, workers: usize, k: usize) -> (usize, usize) {
    (k * warp_count / workers, (k + 1) * warp_count / workers)
}

/// Runs a scheduled sparse layer over a bias sequence with a fixed worker
/// group. One instance per concurrent run; the layer, schedule, and biases
/// are shared read-only state.
pub struct Executor<'a> {
    layer: &'a SparseLayer,
    schedule: &'a WarpSchedule,
    config: RunConfig,
}

impl<'a> Executor<'a> {
    pub fn new(
        layer: &'a SparseLayer,
        schedule: &'a WarpSchedule,
        config: RunConfig,
    ) -> Result<Self> {
        schedule.matches_layer(layer)?;
        if config.workers == 0 {
            return Err(Error::parameter("worker count must be at least 1"));
        }
        if !matches!(config.vector_width, 1 | 2 | 4) {
            return Err(Error::parameter(format!(
                "vector width must be 1, 2, or 4, got {}",
                config.vector_width
            )));
        }
        if config.poll_budget == 0 {
            return Err(Error::parameter("poll budget must be at least 1"));
        }
        Ok(Executor {
            layer,
            schedule,
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Recurrent run: h_t = g(U_r h_{t-1} + bias_t) for each bias term.
    pub fn run(
        &self,
        h0: &ActivationBatch,
        biases: &[BiasTerm],
        g: ActivationFn,
    ) -> Result<RunOutput> {
        if self.schedule.cell() != CellKind::Rnn {
            return Err(Error::parameter(
                "schedule describes an LSTM layer; use run_lstm",
            ));
        }
        self.run_internal(h0, None, biases, g)
    }

    /// LSTM run over a stacked 4H-row gate layer. Gate nonlinearities are
    /// fixed (sigmoid, sigmoid, tanh, sigmoid); cell state stays
    /// worker-local and only the hidden state crosses the shared buffers.
    pub fn run_lstm(
        &self,
        h0: &ActivationBatch,
        c0: &ActivationBatch,
        biases: &[BiasTerm],
    ) -> Result<RunOutput> {
        if self.schedule.cell() != CellKind::Lstm {
            return Err(Error::parameter(
                "schedule describes a plain recurrent layer; use run",
            ));
        }
        if c0.hidden() != h0.hidden() || c0.batch() != h0.batch() {
            return Err(Error::shape(
                "cell state shape differs from hidden state".to_string(),
            ));
        }
        self.run_internal(h0, Some(c0), biases, ActivationFn::Identity)
    }

    fn run_internal(
        &self,
        h0: &ActivationBatch,
        c0: Option<&ActivationBatch>,
        biases: &[BiasTerm],
        g: ActivationFn,
    ) -> Result<RunOutput> {
        let hidden = self.schedule.hidden();
        let batch = h0.batch();
        if h0.hidden() != hidden {
            return Err(Error::shape(format!(
                "initial state has {} elements, layer expects {hidden}",
                h0.hidden()
            )));
        }
        for (t, b) in biases.iter().enumerate() {
            b.check(self.schedule.rows(), batch, &format!("bias for step {t}"))?;
        }
        let timesteps = biases.len();
        let words = hidden * batch;
        let buffer_count = match self.config.sync_mode {
            SyncMode::GlobalBarrier => 1,
            SyncMode::Lamport => 2,
        };

        let h0_bits: Vec<u32> = h0.data().iter().map(|&v| canonical_bits(v)).collect();
        if timesteps == 0 {
            let data: Vec<f32> = h0_bits.iter().map(|&b| f32::from_bits(b)).collect();
            return Ok(RunOutput {
                hidden: ActivationBatch::new(hidden, batch, data)?,
                cell: c0.cloned(),
                stats: RunStats {
                    timesteps: 0,
                    workers: self.config.workers,
                    sync_mode: self.config.sync_mode,
                    vector_width: self.config.vector_width,
                    activation_storage_words: words * buffer_count,
                    publishes: 0,
                    canonicalized_writes: 0,
                    max_polls: 0,
                    prefetched_words: 0,
                },
                trace: self.config.trace.then(Vec::new),
            });
        }

        let mut buffers: Vec<Vec<AtomicU32>> = Vec::with_capacity(buffer_count);
        buffers.push(h0_bits.iter().map(|&b| AtomicU32::new(b)).collect());
        if buffer_count == 2 {
            buffers.push((0..words).map(|_| AtomicU32::new(SENTINEL_BITS)).collect());
        }
        let write_counts: Vec<Vec<AtomicU32>> = (0..buffer_count)
            .map(|_| (0..words).map(|_| AtomicU32::new(0)).collect())
            .collect();

        let ctx = RunCtx {
            layer: self.layer,
            schedule: self.schedule,
            biases,
            g,
            c0: c0.map(|c| c.data()),
            hidden,
            batch,
            timesteps,
            workers: self.config.workers,
            config: &self.config,
            buffers,
            write_counts,
            epochs: [AtomicU64::new(0), AtomicU64::new(0)],
            reset_done: [AtomicUsize::new(0), AtomicUsize::new(0)],
            barrier: matches!(self.config.sync_mode, SyncMode::GlobalBarrier)
                .then(|| AbortableBarrier::new(self.config.workers)),
            abort: AtomicBool::new(false),
            first_error: Mutex::new(None),
            publishes: AtomicU64::new(0),
            canonicalized: AtomicU64::new(0),
            max_polls: AtomicU64::new(0),
            prefetched: AtomicU64::new(0),
        };

        let results: Vec<Option<WorkerDone>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..ctx.workers)
                .map(|k| {
                    let ctx = &ctx;
                    s.spawn(move || {
                        match catch_unwind(AssertUnwindSafe(|| worker_body(ctx, k))) {
                            Ok(Ok(done)) => Some(done),
                            Ok(Err(e)) => {
                                ctx.fail(e);
                                None
                            }
                            Err(payload) => {
                                ctx.fail(Error::WorkerPanic {
                                    worker: k,
                                    message: panic_text(payload),
                                });
                                None
                            }
                        }
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker wrapper never panics"))
                .collect()
        });

        if let Some(e) = ctx.first_error.lock().expect("error slot").take() {
            return Err(e);
        }

        // Exactly-once publication: with T steps the single barrier-mode
        // buffer takes T writes per slot; Lamport's buffers split them by
        // step parity.
        #[cfg(debug_assertions)]
        {
            let expected: Vec<u32> = match self.config.sync_mode {
                SyncMode::GlobalBarrier => vec![timesteps as u32],
                SyncMode::Lamport => {
                    vec![(timesteps / 2) as u32, (timesteps.div_ceil(2)) as u32]
                }
            };
            for (buf, want) in ctx.write_counts.iter().zip(expected) {
                for (slot, count) in buf.iter().enumerate() {
                    debug_assert_eq!(
                        count.load(Ordering::Relaxed),
                        want,
                        "slot {slot} was not published exactly once per step"
                    );
                }
            }
        }

        let final_buf = match self.config.sync_mode {
            SyncMode::GlobalBarrier => &ctx.buffers[0],
            SyncMode::Lamport => &ctx.buffers[timesteps % 2],
        };
        let final_data: Vec<f32> = final_buf
            .iter()
            .map(|w| f32::from_bits(w.load(Ordering::Acquire)))
            .collect();

        let cell = match c0 {
            None => None,
            Some(c0) => {
                let mut merged = c0.data().to_vec();
                for (k, done) in results.iter().enumerate() {
                    let done = done.as_ref().expect("no worker failed");
                    let local = done.cell.as_ref().expect("lstm workers carry cell state");
                    let (lo, hi) = warp_partition(self.schedule.warp_count(), ctx.workers, k);
                    for warp in &self.schedule.warps()[lo..hi] {
                        for row in warp.rows() {
                            if row < hidden {
                                let base = row * batch;
                                merged[base..base + batch]
                                    .copy_from_slice(&local[base..base + batch]);
                            }
                        }
                    }
                }
                Some(ActivationBatch::new(hidden, batch, merged)?)
            }
        };

        let trace = if self.config.trace {
            let mut tr = results[0]
                .as_ref()
                .expect("no worker failed")
                .trace
                .clone();
            tr.push(StepTrace {
                step: timesteps - 1,
                checksum: fnv1a64_f32(&final_data),
            });
            Some(tr)
        } else {
            None
        };

        Ok(RunOutput {
            hidden: ActivationBatch::new(hidden, batch, final_data)?,
            cell,
            stats: RunStats {
                timesteps,
                workers: ctx.workers,
                sync_mode: self.config.sync_mode,
                vector_width: self.config.vector_width,
                activation_storage_words: words * buffer_count,
                publishes: ctx.publishes.load(Ordering::Relaxed),
                canonicalized_writes: ctx.canonicalized.load(Ordering::Relaxed),
                max_polls: ctx.max_polls.load(Ordering::Relaxed),
                prefetched_words: ctx.prefetched.load(Ordering::Relaxed),
            },
            trace,
        })
    }
}

fn panic_text(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".to_string()
    }
}

struct RunCtx<'a> {
    layer: &'a SparseLayer,
    schedule: &'a WarpSchedule,
    biases: &'a [BiasTerm],
    g: ActivationFn,
    c0: Option<&'a [f32]>,
    hidden: usize,
    batch: usize,
    timesteps: usize,
    workers: usize,
    config: &'a RunConfig,
    buffers: Vec<Vec<AtomicU32>>,
    write_counts: Vec<Vec<AtomicU32>>,
    epochs: [AtomicU64; 2],
    reset_done: [AtomicUsize; 2],
    barrier: Option<AbortableBarrier>,
    abort: AtomicBool,
    first_error: Mutex<Option<Error>>,
    publishes: AtomicU64,
    canonicalized: AtomicU64,
    max_polls: AtomicU64,
    prefetched: AtomicU64,
}

impl RunCtx<'_> {
    /// Records the first real failure and wakes every blocked worker.
    fn fail(&self, e: Error) {
        if !matches!(e, Error::Aborted) {
            let mut slot = self.first_error.lock().expect("error slot");
            if slot.is_none() {
                *slot = Some(e);
            }
        }
        self.abort.store(true, Ordering::SeqCst);
        if let Some(b) = &self.barrier {
            b.abort();
        }
    }
}

struct WorkerDone {
    cell: Option<Vec<f32>>,
    trace: Vec<StepTrace>,
}

#[derive(Default)]
struct LocalCounters {
    publishes: u64,
    canonicalized: u64,
    max_polls: u64,
    prefetched: u64,
}

/// Spins until `read` yields a value, with exponential backoff into
/// yields. Honors the abort flag and the poll budget.
fn poll_until(
    read: impl Fn() -> Option<u32>,
    abort: &AtomicBool,
    budget: u64,
    element: usize,
    timestep: usize,
    local: &mut LocalCounters,
) -> Result<u32> {
    let mut polls = 0u64;
    let mut spin = 1u32;
    loop {
        if let Some(v) = read() {
            local.max_polls = local.max_polls.max(polls);
            return Ok(v);
        }
        if abort.load(Ordering::Relaxed) {
            return Err(Error::Aborted);
        }
        polls += 1;
        if polls > budget {
            return Err(Error::PollBudget {
                element,
                timestep,
                polls,
            });
        }
        if spin <= 1024 {
            for _ in 0..spin {
                std::hint::spin_loop();
            }
            spin <<= 1;
        } else {
            std::thread::yield_now();
        }
    }
}

fn worker_body(ctx: &RunCtx<'_>, worker: usize) -> Result<WorkerDone> {
    let (lo, hi) = warp_partition(ctx.schedule.warp_count(), ctx.workers, worker);
    let owned_warps = &ctx.schedule.warps()[lo..hi];
    let owned_matrix_rows: Vec<usize> = owned_warps.iter().flat_map(|w| w.rows()).collect();
    let owned_h_rows: Vec<usize> = match ctx.schedule.cell() {
        CellKind::Rnn => owned_matrix_rows.clone(),
        CellKind::Lstm => owned_matrix_rows
            .iter()
            .copied()
            .filter(|&r| r < ctx.hidden)
            .collect(),
    };

    let words = ctx.hidden * ctx.batch;
    let mut state = WorkerState {
        staged: vec![0.0f32; words],
        need: vec![true; words],
        pre: vec![0.0f32; ctx.schedule.rows() * ctx.batch],
        init: vec![false; ctx.schedule.rows() * ctx.batch],
        cell: ctx.c0.map(|c| c.to_vec()),
        trace: Vec::new(),
        counters: LocalCounters::default(),
        rng: ctx.config.chaos_seed.map(|seed| {
            let mix = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((worker as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
            mix | 1
        }),
        owned_matrix_rows,
        owned_h_rows,
        owned_warps,
        worker,
    };

    match ctx.config.sync_mode {
        SyncMode::Lamport => lamport_loop(ctx, &mut state)?,
        SyncMode::GlobalBarrier => barrier_loop(ctx, &mut state)?,
    }

    ctx.publishes
        .fetch_add(state.counters.publishes, Ordering::Relaxed);
    ctx.canonicalized
        .fetch_add(state.counters.canonicalized, Ordering::Relaxed);
    ctx.prefetched
        .fetch_add(state.counters.prefetched, Ordering::Relaxed);
    ctx.max_polls
        .fetch_max(state.counters.max_polls, Ordering::Relaxed);

    Ok(WorkerDone {
        cell: state.cell.take(),
        trace: state.trace,
    })
}

struct WorkerState<'a> {
    /// Local snapshot of the current hidden state (the load stage target).
    staged: Vec<f32>,
    /// Words of `staged` that still must be consumed from the source
    /// buffer; prefetch clears entries it already copied.
    need: Vec<bool>,
    /// Row pre-activation accumulators, indexed row*batch+sample.
    pre: Vec<f32>,
    /// Whether `pre` holds a first product yet. Folds start from the first
    /// product rather than 0.0 so a row of all-zero products keeps its
    /// IEEE sign (0.0 + -0.0 would erase it).
    init: Vec<bool>,
    /// LSTM cell state, full-size but authoritative only on owned rows.
    cell: Option<Vec<f32>>,
    trace: Vec<StepTrace>,
    counters: LocalCounters,
    rng: Option<u64>,
    owned_matrix_rows: Vec<usize>,
    owned_h_rows: Vec<usize>,
    owned_warps: &'a [Warp],
    worker: usize,
}

impl WorkerState<'_> {
    fn chaos(&mut self) {
        if let Some(rng) = self.rng.as_mut() {
            chaos_pause(rng);
        }
    }

    /// Folds every owned lane's pair products into per-row accumulators.
    /// Lane partials run in position order; rows combine lanes in
    /// ascending lane id, which fixes the reduce order globally.
    fn accumulate(&mut self, layer: &SparseLayer, batch: usize) {
        for &row in &self.owned_matrix_rows {
            for b in 0..batch {
                self.init[row * batch + b] = false;
            }
        }
        for warp in self.owned_warps {
            for (_l, lane) in warp.lanes() {
                let row = lane.row();
                let pairs = layer.row_pairs(row);
                for b in 0..batch {
                    let mut positions = lane.positions().iter();
                    let &first = positions.next().expect("active lanes hold a position");
                    let p = pairs[first];
                    let mut partial = p.value * self.staged[p.index as usize * batch + b];
                    for &pos in positions {
                        let p = pairs[pos];
                        partial += p.value * self.staged[p.index as usize * batch + b];
                    }
                    let slot = row * batch + b;
                    if self.init[slot] {
                        self.pre[slot] += partial;
                    } else {
                        self.pre[slot] = partial;
                        self.init[slot] = true;
                    }
                }
            }
        }
    }

    /// Applies bias and nonlinearity to owned rows and publishes the
    /// step's hidden-state words into `buf`.
    fn finish_and_publish(
        &mut self,
        ctx: &RunCtx<'_>,
        buf_index: usize,
        step: usize,
    ) {
        #[cfg(test)]
        match ctx.config.fault {
            Some(Fault::Panic { worker, step: s }) if worker == self.worker && s == step => {
                panic!("injected fault at step {step}")
            }
            Some(Fault::StallPublish {
                worker,
                step: s,
                millis,
            }) if worker == self.worker && s == step => {
                std::thread::sleep(std::time::Duration::from_millis(millis));
            }
            _ => {}
        }
        let _ = step;

        let batch = ctx.batch;
        let bias = &ctx.biases[step];
        let buf = &ctx.buffers[buf_index];
        let counts = &ctx.write_counts[buf_index];
        match ctx.schedule.cell() {
            CellKind::Rnn => {
                for i in 0..self.owned_h_rows.len() {
                    let row = self.owned_h_rows[i];
                    for b in 0..batch {
                        let slot = row * batch + b;
                        debug_assert!(self.init[slot], "row {row} never accumulated");
                        let value = ctx.g.apply(self.pre[slot] + bias.at(row, b));
                        self.publish(buf, counts, slot, value);
                    }
                }
            }
            CellKind::Lstm => {
                let hidden = ctx.hidden;
                for i in 0..self.owned_h_rows.len() {
                    let unit = self.owned_h_rows[i];
                    for b in 0..batch {
                        let gate = |g: usize| {
                            let slot = (g * hidden + unit) * batch + b;
                            debug_assert!(self.init[slot], "gate row never accumulated");
                            self.pre[slot] + bias.at(g * hidden + unit, b)
                        };
                        let i_gate = ActivationFn::Sigmoid.apply(gate(0));
                        let f_gate = ActivationFn::Sigmoid.apply(gate(1));
                        let g_cand = gate(2).tanh();
                        let o_gate = ActivationFn::Sigmoid.apply(gate(3));
                        let slot = unit * batch + b;
                        let cell = self.cell.as_mut().expect("lstm run carries cell state");
                        let c_new = f_gate * cell[slot] + i_gate * g_cand;
                        cell[slot] = c_new;
                        self.publish(buf, counts, slot, o_gate * c_new.tanh());
                    }
                }
            }
        }
    }

    fn publish(&mut self, buf: &[AtomicU32], counts: &[AtomicU32], slot: usize, value: f32) {
        let mut bits = value.to_bits();
        if bits == SENTINEL_BITS {
            bits = 0;
            self.counters.canonicalized += 1;
        }
        counts[slot].fetch_add(1, Ordering::Relaxed);
        buf[slot].store(bits, Ordering::Release);
        self.counters.publishes += 1;
    }

    fn record_trace(&mut self, ctx: &RunCtx<'_>, step: usize) {
        if ctx.config.trace && self.worker == 0 && step > 0 {
            self.trace.push(StepTrace {
                step: step - 1,
                checksum: fnv1a64_f32(&self.staged),
            });
        }
    }
}

fn lamport_loop(ctx: &RunCtx<'_>, state: &mut WorkerState<'_>) -> Result<()> {
    let words = ctx.hidden * ctx.batch;
    for t in 0..ctx.timesteps {
        let src = t % 2;
        let dst = (t + 1) % 2;
        state.chaos();

        // The source epoch reaching t means every worker finished staging
        // h_{t-1}, so the stale words of the destination buffer are dead
        // and may be reset below.
        poll_until(
            || (ctx.epochs[src].load(Ordering::Acquire) == t as u64).then_some(0),
            &ctx.abort,
            ctx.config.poll_budget,
            usize::MAX,
            t,
            &mut state.counters,
        )?;

        for w in 0..words {
            if state.need[w] {
                let bits = {
                    let fast = ctx.buffers[src][w].load(Ordering::Acquire);
                    if fast != SENTINEL_BITS {
                        fast
                    } else {
                        poll_until(
                            || {
                                let b = ctx.buffers[src][w].load(Ordering::Acquire);
                                (b != SENTINEL_BITS).then_some(b)
                            },
                            &ctx.abort,
                            ctx.config.poll_budget,
                            w,
                            t,
                            &mut state.counters,
                        )?
                    }
                };
                state.staged[w] = f32::from_bits(bits);
            }
        }
        state.need.fill(true);
        state.record_trace(ctx, t);

        // Reset owned destination slots to the sentinel, then count in.
        // The last worker to count publishes the new epoch, which releases
        // all resets to every consumer of this buffer.
        for &row in &state.owned_h_rows {
            for b in 0..ctx.batch {
                ctx.buffers[dst][row * ctx.batch + b].store(SENTINEL_BITS, Ordering::Relaxed);
            }
        }
        let prev = ctx.reset_done[dst].fetch_add(1, Ordering::AcqRel);
        if prev + 1 == ctx.workers {
            ctx.reset_done[dst].store(0, Ordering::Relaxed);
            ctx.epochs[dst].store(t as u64 + 1, Ordering::Release);
        }

        state.accumulate(ctx.layer, ctx.batch);
        state.chaos();
        state.finish_and_publish(ctx, dst, t);

        // Pipelined load: words of h_{t+1} already published can be staged
        // now. Gated on the epoch so a stale pre-reset word can never be
        // mistaken for fresh data; unpublished words stay flagged for the
        // next stage pass.
        if ctx.config.prefetch
            && t + 1 < ctx.timesteps
            && ctx.epochs[dst].load(Ordering::Acquire) == t as u64 + 1
        {
            for w in 0..words {
                let bits = ctx.buffers[dst][w].load(Ordering::Acquire);
                if bits != SENTINEL_BITS {
                    state.staged[w] = f32::from_bits(bits);
                    state.need[w] = false;
                    state.counters.prefetched += 1;
                }
            }
        }
    }
    Ok(())
}

fn barrier_loop(ctx: &RunCtx<'_>, state: &mut WorkerState<'_>) -> Result<()> {
    let words = ctx.hidden * ctx.batch;
    let barrier = ctx.barrier.as_ref().expect("barrier mode has a barrier");
    for t in 0..ctx.timesteps {
        state.chaos();
        // The buffer is fully valid between steps; snapshot it, then fence
        // so nobody overwrites words another worker has not copied yet.
        for w in 0..words {
            state.staged[w] = f32::from_bits(ctx.buffers[0][w].load(Ordering::Acquire));
        }
        state.record_trace(ctx, t);
        barrier.wait()?;

        state.accumulate(ctx.layer, ctx.batch);
        state.chaos();
        state.finish_and_publish(ctx, 0, t);
        barrier.wait()?;
    }
    Ok(())
}
