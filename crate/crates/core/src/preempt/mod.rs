//! Preemptible function contexts.
//!
//! A context carries one request's progress between slices. The caller
//! launches it with a timeout; control comes back either when the work
//! finishes or when the slice expires, and a preempted context can later be
//! resumed, possibly by a different worker.
//!
//! The simulation flavor here tracks remaining service time. The real flavor
//! in [`rt`] runs closures on private stacks and is interrupted by the timer
//! service.

mod pool;
pub mod rt;

pub use pool::{ContextPool, Poolable, DEFAULT_POOL_CAPACITY};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::units;

/// Default charge added to a worker's busy time for each preemption.
pub const DEFAULT_PREEMPT_OVERHEAD_NS: u64 = 1_000;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum PreemptError {
    #[error("context pool exhausted")]
    PoolExhausted,
    #[error("context {id} is {found:?}, expected {expected:?}")]
    InvalidState {
        id: u64,
        expected: ContextState,
        found: ContextState,
    },
    #[error("timeout must be positive")]
    ZeroTimeout,
    #[error("preemptible function panicked: {0}")]
    WorkPanicked(String),
    #[error("context setup failed: {0}")]
    Setup(String),
}

/// A slice length, or no limit.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quantum {
    Finite(u64),
    Infinite,
}

impl Quantum {
    pub fn from_ns(ns: u64) -> Self {
        Quantum::Finite(ns)
    }

    pub fn as_ns(self) -> Option<u64> {
        match self {
            Quantum::Finite(n) => Some(n),
            Quantum::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        self == Quantum::Infinite
    }
}

impl fmt::Display for Quantum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Quantum::Finite(n) => write!(f, "{n}"),
            Quantum::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Quantum {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinite") {
            return Ok(Quantum::Infinite);
        }
        units::parse_duration_ns(t).map(Quantum::Finite)
    }
}

impl Serialize for Quantum {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Quantum::Finite(n) => s.serialize_str(&units::format_duration_ns(*n)),
            Quantum::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Quantum {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Quantum::Finite(n)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum ContextState {
    Fresh,
    Running,
    Preempted,
    Completed,
}

/// What one slice did.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct SliceOutcome {
    pub completed: bool,
    /// Useful work done in the slice.
    pub ran_ns: u64,
    /// Preemption charge for the slice (zero when it completed).
    pub overhead_ns: u64,
}

impl SliceOutcome {
    /// Worker time occupied by the slice.
    pub fn busy_ns(&self) -> u64 {
        self.ran_ns + self.overhead_ns
    }
}

/// Simulation context: progress is the remaining service demand.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskContext {
    pub id: u64,
    pub state: ContextState,
    pub remaining_ns: u64,
    pub preempt_count: u32,
    pub quantum_used_ns: u64,
}

impl TaskContext {
    pub fn new(id: u64) -> Self {
        TaskContext {
            id,
            state: ContextState::Fresh,
            remaining_ns: 0,
            preempt_count: 0,
            quantum_used_ns: 0,
        }
    }
}

impl Poolable for TaskContext {
    fn recycle(&mut self, new_id: u64) {
        *self = TaskContext::new(new_id);
    }
}

fn expect_state(ctx: &TaskContext, expected: ContextState) -> Result<(), PreemptError> {
    if ctx.state != expected {
        return Err(PreemptError::InvalidState {
            id: ctx.id,
            expected,
            found: ctx.state,
        });
    }
    Ok(())
}

fn run_slice(ctx: &mut TaskContext, timeout: Quantum, overhead_ns: u64) -> SliceOutcome {
    ctx.state = ContextState::Running;
    let limit = timeout.as_ns().unwrap_or(u64::MAX);
    let ran = ctx.remaining_ns.min(limit);
    ctx.remaining_ns -= ran;
    ctx.quantum_used_ns += ran;
    if ctx.remaining_ns == 0 {
        ctx.state = ContextState::Completed;
        SliceOutcome {
            completed: true,
            ran_ns: ran,
            overhead_ns: 0,
        }
    } else {
        ctx.state = ContextState::Preempted;
        ctx.preempt_count += 1;
        SliceOutcome {
            completed: false,
            ran_ns: ran,
            overhead_ns,
        }
    }
}

/// Starts a fresh context on `demand_ns` of work for at most `timeout`.
pub fn fn_launch(
    ctx: &mut TaskContext,
    demand_ns: u64,
    timeout: Quantum,
    overhead_ns: u64,
) -> Result<SliceOutcome, PreemptError> {
    expect_state(ctx, ContextState::Fresh)?;
    if timeout == Quantum::Finite(0) {
        return Err(PreemptError::ZeroTimeout);
    }
    ctx.remaining_ns = demand_ns;
    Ok(run_slice(ctx, timeout, overhead_ns))
}

/// Continues a preempted context for at most `timeout`.
pub fn fn_resume(
    ctx: &mut TaskContext,
    timeout: Quantum,
    overhead_ns: u64,
) -> Result<SliceOutcome, PreemptError> {
    expect_state(ctx, ContextState::Preempted)?;
    if timeout == Quantum::Finite(0) {
        return Err(PreemptError::ZeroTimeout);
    }
    Ok(run_slice(ctx, timeout, overhead_ns))
}

pub fn fn_completed(ctx: &TaskContext) -> bool {
    ctx.state == ContextState::Completed
}
