//! Time sources and the deterministic event queue behind the simulation
//! backend.
//!
//! All times are integer nanoseconds. A [`Timestamp`] is an absolute point
//! measured from the start of a run; durations are plain `u64` nanosecond
//! counts.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, AddAssign};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nanoseconds since the start of a run.
#[derive(
    Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);
    pub const MAX: Timestamp = Timestamp(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        Timestamp(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        Timestamp(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        Timestamp(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        Timestamp(s * 1_000_000_000)
    }

    pub const fn nanos(self) -> u64 {
        self.0
    }

    /// Elapsed nanoseconds from `earlier` to `self`, zero if `earlier` is later.
    pub const fn since(self, earlier: Timestamp) -> u64 {
        self.0.saturating_sub(earlier.0)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }
}

impl Add<u64> for Timestamp {
    type Output = Timestamp;

    fn add(self, rhs: u64) -> Timestamp {
        Timestamp(self.0.saturating_add(rhs))
    }
}

impl AddAssign<u64> for Timestamp {
    fn add_assign(&mut self, rhs: u64) {
        self.0 = self.0.saturating_add(rhs);
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Anything that can tell the current time.
pub trait Clock {
    fn now(&self) -> Timestamp;
}

/// Monotonic wall clock anchored at construction.
#[derive(Copy, Clone, Debug)]
pub struct RealClock {
    start: Instant,
}

impl RealClock {
    pub fn new() -> Self {
        RealClock {
            start: Instant::now(),
        }
    }

    pub fn start(&self) -> Instant {
        self.start
    }
}

impl Default for RealClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for RealClock {
    #[inline]
    fn now(&self) -> Timestamp {
        Timestamp(self.start.elapsed().as_nanos() as u64)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClockError {
    #[error("event scheduled in the past: fire_at={fire_at} < now={now}")]
    SchedulingInPast { fire_at: Timestamp, now: Timestamp },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    Arrival,
    QuantumExpiry,
    ControllerTick,
    Custom,
}

/// One entry of the simulation queue.
#[derive(Clone, Debug)]
pub struct SimEvent<P> {
    pub fire_at: Timestamp,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: P,
}

impl<P> SimEvent<P> {
    fn key(&self) -> (Timestamp, u64) {
        (self.fire_at, self.seq)
    }
}

impl<P> PartialEq for SimEvent<P> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<P> Eq for SimEvent<P> {}

impl<P> PartialOrd for SimEvent<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Reversed so the max-heap pops the smallest (fire_at, seq).
impl<P> Ord for SimEvent<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

/// Binary-heap event queue that doubles as the virtual clock.
///
/// `now()` is the fire time of the most recently popped event, starting at 0.
pub struct EventQueue<P> {
    heap: BinaryHeap<SimEvent<P>>,
    next_seq: u64,
    now: Timestamp,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: Timestamp::ZERO,
        }
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn peek_time(&self) -> Option<Timestamp> {
        self.heap.peek().map(|e| e.fire_at)
    }

    /// Inserts an event and returns its sequence number.
    pub fn schedule(
        &mut self,
        fire_at: Timestamp,
        kind: EventKind,
        payload: P,
    ) -> Result<u64, ClockError> {
        if fire_at < self.now {
            return Err(ClockError::SchedulingInPast {
                fire_at,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(SimEvent {
            fire_at,
            seq,
            kind,
            payload,
        });
        Ok(seq)
    }

    /// Removes the earliest event and advances the clock to it.
    pub fn pop(&mut self) -> Option<SimEvent<P>> {
        let ev = self.heap.pop()?;
        debug_assert!(ev.fire_at >= self.now);
        self.now = ev.fire_at;
        Some(ev)
    }

    /// Moves the clock forward without dispatching anything.
    pub fn advance_to(&mut self, t: Timestamp) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Dispatches every event with `fire_at <= limit`, including those the
    /// handler schedules along the way. Returns the number dispatched.
    pub fn run_until<F>(&mut self, limit: Timestamp, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, SimEvent<P>),
    {
        let mut dispatched = 0;
        while let Some(t) = self.peek_time() {
            if t > limit {
                break;
            }
            let ev = self.pop().expect("peeked");
            handler(self, ev);
            dispatched += 1;
        }
        dispatched
    }
}
