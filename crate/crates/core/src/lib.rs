//! Preemptive user-level scheduling of microsecond-scale requests.
//!
//! The crate models a two-level scheduler (a dispatcher feeding per-worker
//! queues, plus a shared list of preempted requests) whose workers run each
//! request in a preemptible context for at most one time quantum. Quanta can
//! be fixed or chosen online by a controller that watches load, queueing and
//! the latency tail.
//!
//! Two backends share the same policies: a deterministic discrete-event
//! simulation and a real-time runtime with a dedicated timer thread.

pub mod cli;
pub mod clock;
pub mod controller;
pub mod metrics;
pub mod preempt;
pub mod sched;
pub mod units;
pub mod utimer;
pub mod workload;
