//! Crate-wide error type.

/// Unified error for construction, file, schedule, and execution failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Malformed file contents; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// In-memory layer violates its own invariants (e.g. index out of range).
    #[error("corrupt layer: {0}")]
    Corrupt(String),

    #[error("schedule does not match layer: {0}")]
    ScheduleMismatch(String),

    /// A consumer polled an element past the configured budget; names the
    /// stuck element and timestep so deadlocks are diagnosable. `element`
    /// is a flat activation-word index, or usize::MAX when the stall was
    /// the timestep-epoch wait rather than a single word.
    #[error("{}", poll_budget_message(*element, *timestep, *polls))]
    PollBudget {
        element: usize,
        timestep: usize,
        polls: u64,
    },

    #[error("worker {worker} panicked: {message}")]
    WorkerPanic { worker: usize, message: String },

    /// A worker stopped because another worker already failed; the run's
    /// result carries the original error, not this one.
    #[error("run aborted after a failure in another worker")]
    Aborted,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn poll_budget_message(element: usize, timestep: usize, polls: u64) -> String {
    if element == usize::MAX {
        format!(
            "poll budget exhausted: epoch of timestep {timestep} \
             still unreached after {polls} polls"
        )
    } else {
        format!(
            "poll budget exhausted: element {element} of timestep {timestep} \
             still unpublished after {polls} polls"
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }
}
