//! Two-level request scheduler.
//!
//! A dispatcher places arriving requests round-robin on per-worker FIFO
//! queues. An idle worker takes the head of its own queue first and only
//! then the head of the global running list, which holds preempted
//! requests. Each slice runs for at most the policy's current quantum.

mod capacity;
mod config;
mod rt;
mod sim;

pub use capacity::{max_throughput, SloRule, ThroughputSearch};
pub use config::{run_experiment, Backend, ExperimentConfig, PolicyKind};
pub use rt::{run_realtime, RealtimeParams};
pub use sim::{simulate_requests, SimParams, SimScheduler};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::controller::{ControllerError, ControllerHyperparams, TraceRow};
use crate::metrics::SummaryBuilder;
use crate::preempt::{PreemptError, Quantum};
use crate::utimer::TimerError;
use crate::workload::WorkloadError;

/// Smallest quantum a policy accepts unless configured otherwise.
pub const DEFAULT_MIN_QUANTUM_NS: u64 = 3_000;

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("local queue of worker {worker} is full")]
    AdmissionQueueFull { worker: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Timer(#[from] TimerError),
    #[error(transparent)]
    Preempt(#[from] PreemptError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Scheduling discipline.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    /// FCFS without preemption.
    RunToCompletion,
    /// FCFS with a fixed quantum; preempted requests go to the running list.
    PreemptFcfs { quantum: Quantum },
    /// FCFS whose quantum is retuned every controller period.
    PreemptFcfsDynamic {
        initial: u64,
        hyper: ControllerHyperparams,
    },
    /// Fixed quantum; preempted requests rejoin the tail of their worker's
    /// local queue.
    RoundRobin { quantum: Quantum },
}

impl Policy {
    pub fn validate(&self, min_quantum_ns: u64) -> Result<(), SchedError> {
        let check = |q: &Quantum| match q {
            Quantum::Finite(n) if *n < min_quantum_ns => Err(SchedError::Config(format!(
                "quantum {n}ns below minimum {min_quantum_ns}ns"
            ))),
            _ => Ok(()),
        };
        match self {
            Policy::RunToCompletion => Ok(()),
            Policy::PreemptFcfs { quantum } | Policy::RoundRobin { quantum } => check(quantum),
            Policy::PreemptFcfsDynamic { hyper, .. } => {
                hyper.validate()?;
                if hyper.t_min < min_quantum_ns {
                    return Err(SchedError::Config(format!(
                        "controller t_min {}ns below minimum {min_quantum_ns}ns",
                        hyper.t_min
                    )));
                }
                Ok(())
            }
        }
    }

    /// Short label used in summary rows.
    pub fn name(&self) -> &'static str {
        match self {
            Policy::RunToCompletion => "rtc",
            Policy::PreemptFcfs { .. } => "preempt_fcfs",
            Policy::PreemptFcfsDynamic { .. } => "preempt_fcfs_dynamic",
            Policy::RoundRobin { .. } => "round_robin",
        }
    }

    /// Quantum column for summary rows.
    pub fn quantum_label(&self) -> String {
        match self {
            Policy::RunToCompletion => "inf".into(),
            Policy::PreemptFcfs { quantum } | Policy::RoundRobin { quantum } => quantum.to_string(),
            Policy::PreemptFcfsDynamic { .. } => "dyn".into(),
        }
    }
}

/// How a run ended.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub arrived: u64,
    pub completed: u64,
    /// Still queued, running or preempted when the run stopped.
    pub resident: u64,
    pub rejected: u64,
    pub preemptions: u64,
    pub summary: SummaryBuilder,
    pub trace: Vec<TraceRow>,
    pub horizon: Timestamp,
    /// Time of the last processed event.
    pub end: Timestamp,
    /// `workers / E[S]` in requests per second.
    pub max_load_rps: f64,
}

/// Where the dispatcher places new requests.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dispatch {
    /// Round-robin over the per-worker local queues.
    #[default]
    RoundRobin,
    /// One shared FIFO that every idle worker reads before the running list.
    Centralized,
}

/// Parameter varied by a sweep.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Quantum,
    Load,
}
