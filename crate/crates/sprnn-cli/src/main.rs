//! `sprnn` — command line frontend for the sparse persistent recurrent
//! inference engine.
//!
//! The subcommands cover the whole pipeline: synthesize a dense matrix
//! (`gen`), prune it to an index/value layer (`prune`), reorder the layer
//! for conflict-free bank access (`layout`), execute it on the multi-worker
//! engine (`run`), count bank-conflict cycles (`simulate`), and check a
//! workload against a GPU resource profile (`feasibility`).
//!
//! Every command is deterministic given its arguments: `gen` and `run`
//! require an explicit `--seed`, and every produced file gets a
//! `<file>.manifest.json` sidecar recording the command, parameters, and
//! content checksums. Reports are plain text by default and versioned JSON
//! with `--json`.
//!
//! Exit codes: 0 success; 1 usage or parameter errors; 2 unreadable,
//! unwritable, or malformed files; 3 verification failure (`run --verify`
//! exceeded its tolerance).

mod commands;
mod manifest;
mod synth;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sprnn_core::{Algorithm, CellKind, PruneStrategy, SyncMode};

use synth::Dist;

/// A command failure plus the exit-code class it belongs to.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or parameter values (exit 1).
    Usage(String),
    /// Unreadable, unwritable, or malformed files (exit 2).
    Format(String),
    /// An oracle check failed (exit 3).
    Verification(String),
}

impl Failure {
    fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Format(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Format(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<sprnn_core::Error> for Failure {
    fn from(e: sprnn_core::Error) -> Self {
        use sprnn_core::Error as E;
        match e {
            E::Shape(_)
            | E::Parameter(_)
            | E::ScheduleMismatch(_)
            | E::PollBudget { .. }
            | E::WorkerPanic { .. }
            | E::Aborted => Failure::Usage(e.to_string()),
            E::Format { .. } | E::Corrupt(_) | E::Io(_) => Failure::Format(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

#[derive(Parser)]
#[command(
    name = "sprnn",
    version,
    about = "Sparse persistent recurrent inference toolkit",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded pseudo-random dense matrix file.
    Gen(GenArgs),
    /// Prune a dense matrix into a padded index/value layer file.
    Prune(PruneArgs),
    /// Reorder each row of a layer for conflict-free bank access.
    Layout(LayoutArgs),
    /// Execute a layer over synthesized inputs on the multi-worker engine.
    Run(RunArgs),
    /// Count shared-memory bank conflict cycles for a stored layer.
    Simulate(SimulateArgs),
    /// Check whether a workload fits a GPU architecture profile.
    Feasibility(FeasibilityArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Matrix rows.
    #[arg(long)]
    rows: usize,
    /// Matrix columns.
    #[arg(long)]
    cols: usize,
    /// RNG seed; the same seed always yields byte-identical output.
    #[arg(long)]
    seed: u64,
    /// Entry distribution.
    #[arg(long, value_enum, default_value_t = Dist::Uniform)]
    dist: Dist,
    /// Output path for the dense matrix file.
    #[arg(long, short = 'o')]
    out: PathBuf,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PruneArgs {
    /// Dense matrix file to prune.
    #[arg(long = "in", short = 'i')]
    input: PathBuf,
    /// Fraction of weights to keep, in (0, 1].
    #[arg(long, short = 'd')]
    density: f64,
    /// Which weights are kept.
    #[arg(long, value_enum, default_value_t = Mode::RowBalanced)]
    mode: Mode,
    /// Output path for the layer file.
    #[arg(long, short = 'o')]
    out: PathBuf,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct LayoutArgs {
    /// Layer file to reorder.
    #[arg(long = "in", short = 'i')]
    input: PathBuf,
    /// Vector load width the order is tuned for.
    #[arg(long = "width", short = 'w', value_parser = parse_width)]
    width: u8,
    /// Output path for the reordered layer file.
    #[arg(long, short = 'o')]
    out: PathBuf,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Layer file to execute.
    #[arg(long = "in", short = 'i')]
    input: PathBuf,
    /// Seed for the synthesized initial state and per-step biases.
    #[arg(long)]
    seed: u64,
    /// JSON file with run settings; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cell type the layer's rows encode.
    #[arg(long, value_enum, default_value_t = Cell::Rnn)]
    cell: Cell,
    /// Number of timesteps.
    #[arg(long, short = 'T')]
    timesteps: Option<usize>,
    /// Batch samples per step.
    #[arg(long, short = 'B')]
    batch: Option<usize>,
    /// Output nonlinearity (plain recurrent cells only; LSTM gates are fixed).
    #[arg(long, value_enum)]
    activation: Option<Act>,
    /// Worker synchronization protocol.
    #[arg(long, value_enum)]
    sync: Option<Sync>,
    /// Worker thread count.
    #[arg(long)]
    workers: Option<usize>,
    /// Vector load width used by the workers.
    #[arg(long = "width", short = 'w', value_parser = parse_width)]
    width: Option<u8>,
    /// Record per-step output checksums.
    #[arg(long)]
    trace: bool,
    /// Check the final state against the dense reference implementation.
    #[arg(long)]
    verify: bool,
    /// Max relative error `--verify` accepts.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f32,
    /// Write the final state as JSON to this path.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Layer file to measure.
    #[arg(long = "in", short = 'i')]
    input: PathBuf,
    /// Vector load width to simulate.
    #[arg(long = "width", short = 'w', value_parser = parse_width)]
    width: u8,
    /// Cell type the layer's rows encode.
    #[arg(long, value_enum, default_value_t = Cell::Rnn)]
    cell: Cell,
    /// Lanes per matrix row (default: 32 for rnn, 8 for lstm).
    #[arg(long)]
    lanes: Option<usize>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FeasibilityArgs {
    /// Architecture profile JSON file.
    #[arg(long)]
    arch: PathBuf,
    /// Hidden layer size.
    #[arg(long, short = 'H')]
    hidden: usize,
    /// Fraction of weights kept by pruning (1.0 = fully dense).
    #[arg(long, short = 'd', default_value_t = 1.0)]
    density: f64,
    /// Algorithm to check; omit to print a table over all of them.
    #[arg(long, value_enum)]
    algo: Option<Algo>,
    /// Vector load width.
    #[arg(long = "width", short = 'w', value_parser = parse_width, default_value = "1")]
    width: u8,
    /// Worker synchronization protocol.
    #[arg(long, value_enum, default_value_t = Sync::Lamport)]
    sync: Sync,
    /// Batch samples per step.
    #[arg(long, short = 'B', default_value_t = 1)]
    batch: usize,
    /// What-if: pack column indices in 16 bits, halving their register cost.
    #[arg(long)]
    index16: bool,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Keep the globally largest weights; rows may end up uneven.
    Naive,
    /// Keep the largest weights of every row; rows stay uniform.
    RowBalanced,
}

impl From<Mode> for PruneStrategy {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Naive => PruneStrategy::Naive,
            Mode::RowBalanced => PruneStrategy::RowBalanced,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Cell {
    /// Plain recurrent cell: one matrix row per output element.
    Rnn,
    /// LSTM cell: four stacked gate rows per output element.
    Lstm,
}

impl From<Cell> for CellKind {
    fn from(c: Cell) -> Self {
        match c {
            Cell::Rnn => CellKind::Rnn,
            Cell::Lstm => CellKind::Lstm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Sync {
    /// Flag-free publish/poll synchronization on data words.
    Lamport,
    /// One full barrier between timesteps.
    GlobalBarrier,
}

impl From<Sync> for SyncMode {
    fn from(s: Sync) -> Self {
        match s {
            Sync::Lamport => SyncMode::Lamport,
            Sync::GlobalBarrier => SyncMode::GlobalBarrier,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Act {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl From<Act> for sprnn_core::ActivationFn {
    fn from(a: Act) -> Self {
        use sprnn_core::ActivationFn as F;
        match a {
            Act::Tanh => F::Tanh,
            Act::Relu => F::Relu,
            Act::Sigmoid => F::Sigmoid,
            Act::Identity => F::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Algo {
    DenseGemm,
    SparseGemm,
    DensePersistent,
    SparsePersistent,
}

impl From<Algo> for Algorithm {
    fn from(a: Algo) -> Self {
        match a {
            Algo::DenseGemm => Algorithm::DenseGemm,
            Algo::SparseGemm => Algorithm::SparseGemm,
            Algo::DensePersistent => Algorithm::DensePersistent,
            Algo::SparsePersistent => Algorithm::SparsePersistent,
        }
    }
}

fn parse_width(s: &str) -> Result<u8, String> {
    match s {
        "1" => Ok(1),
        "2" => Ok(2),
        "4" => Ok(4),
        _ => Err(format!("vector width must be 1, 2, or 4, got {s}")),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; they are not failures.
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Prune(a) => commands::prune(a),
        Command::Layout(a) => commands::layout(a),
        Command::Run(a) => commands::run(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Feasibility(a) => commands::feasibility(a),
    };
    if let Err(f) = result {
        eprintln!("error: {}", f.message());
        std::process::exit(f.exit_code());
    }
}
