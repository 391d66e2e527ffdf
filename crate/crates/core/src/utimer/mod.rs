//! User-level deadline timer.
//!
//! A task registers a deadline cell and arms it with the absolute time of its
//! next preemption. A timer service watches the cells and emits exactly one
//! [`Notification`] per armed generation once its deadline has passed.
//!
//! Two services implement this contract:
//! * [`SimTimer`] runs inside the discrete-event simulation and fires at the
//!   armed deadline exactly;
//! * [`RealTimer`] runs a dedicated poller thread against the monotonic clock.
//!
//! Both can index pending deadlines with a linear scan of the cell table or
//! with a [`TimingWheel`].

mod cell;
mod probe;
mod real;
mod wheel;

pub use cell::{DeadlineCell, DISARMED};
pub use probe::{
    measure_precision, measure_precision_virtual, scalability_probe, scalability_probe_virtual,
    PrecisionReport, ScalabilityRow,
};
pub use real::{utimer_init, NotificationSink, RealCell, RealTimer};
pub use wheel::TimingWheel;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::units;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum TimerError {
    #[error("timer service already initialized")]
    AlreadyInitialized,
    #[error("timer service not running")]
    NotRunning,
    #[error("deadline cell table full (capacity {0})")]
    CapacityExceeded(usize),
    #[error("invalid timer config: {0}")]
    Config(String),
    #[error("unknown cell {0}")]
    UnknownCell(usize),
    #[error("failed to start poller thread: {0}")]
    Spawn(String),
}

/// What the poller does between scans.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PollMode {
    /// Tight loop with a spin hint.
    #[default]
    Spin,
    /// `sched_yield` after every scan; friendlier on shared cores.
    Yield,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimerConfig {
    /// Minimum time between poller scans; 0 polls continuously.
    #[serde(with = "units::duration")]
    pub poll_interval: u64,
    pub poll_mode: PollMode,
    pub use_wheel: bool,
    #[serde(with = "units::duration")]
    pub wheel_slot: u64,
    pub wheel_slots: usize,
    /// Fixed size of the cell table.
    pub capacity: usize,
}

impl Default for TimerConfig {
    fn default() -> Self {
        TimerConfig {
            poll_interval: 0,
            poll_mode: PollMode::Spin,
            use_wheel: false,
            wheel_slot: 3_000,
            wheel_slots: 4096,
            capacity: 1024,
        }
    }
}

impl TimerConfig {
    pub fn validate(&self) -> Result<(), TimerError> {
        if self.wheel_slot == 0 {
            return Err(TimerError::Config("wheel_slot must be positive".into()));
        }
        if self.wheel_slots < 2 {
            return Err(TimerError::Config("wheel_slots must be at least 2".into()));
        }
        if self.capacity == 0 {
            return Err(TimerError::Config("capacity must be positive".into()));
        }
        Ok(())
    }
}

/// Identifies a registered cell within its service.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellId(pub usize);

/// A fired deadline, attributable to one (cell, generation) pair.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Notification {
    pub cell: CellId,
    pub owner: u64,
    pub generation: u64,
    pub deadline: Timestamp,
    /// Clock reading of the scan that found the deadline expired.
    pub fired_at: Timestamp,
}

#[derive(Clone, Debug)]
struct SimCell {
    owner: u64,
    deadline: Option<Timestamp>,
    generation: u64,
}

/// Timer service for the simulation backend.
///
/// The driver asks for [`SimTimer::next_deadline`], schedules a check event
/// at that time and calls [`SimTimer::expire`] when it fires, so every
/// notification carries `fired_at == deadline`.
#[derive(Debug)]
pub struct SimTimer {
    cfg: TimerConfig,
    cells: Vec<SimCell>,
    wheel: Option<TimingWheel<(CellId, u64)>>,
    initialized: bool,
    scratch: Vec<(u64, (CellId, u64))>,
}

impl SimTimer {
    pub fn new(cfg: TimerConfig) -> Result<Self, TimerError> {
        cfg.validate()?;
        let wheel = cfg
            .use_wheel
            .then(|| TimingWheel::new(cfg.wheel_slot, cfg.wheel_slots));
        Ok(SimTimer {
            cells: Vec::with_capacity(cfg.capacity),
            cfg,
            wheel,
            initialized: false,
            scratch: Vec::new(),
        })
    }

    /// Marks the service running; a second call fails.
    pub fn init(&mut self) -> Result<(), TimerError> {
        if self.initialized {
            return Err(TimerError::AlreadyInitialized);
        }
        self.initialized = true;
        Ok(())
    }

    pub fn config(&self) -> &TimerConfig {
        &self.cfg
    }

    pub fn register(&mut self, owner: u64) -> Result<CellId, TimerError> {
        if !self.initialized {
            return Err(TimerError::NotRunning);
        }
        if self.cells.len() >= self.cfg.capacity {
            return Err(TimerError::CapacityExceeded(self.cfg.capacity));
        }
        self.cells.push(SimCell {
            owner,
            deadline: None,
            generation: 0,
        });
        Ok(CellId(self.cells.len() - 1))
    }

    fn cell_mut(&mut self, id: CellId) -> Result<&mut SimCell, TimerError> {
        self.cells
            .get_mut(id.0)
            .ok_or(TimerError::UnknownCell(id.0))
    }

    /// Arms `id` for `at`; a deadline in the past fires at `now`. Returns
    /// the new generation.
    pub fn arm(&mut self, id: CellId, at: Timestamp, now: Timestamp) -> Result<u64, TimerError> {
        let effective = at.max(now);
        let cell = self.cell_mut(id)?;
        cell.generation += 1;
        cell.deadline = Some(effective);
        let generation = cell.generation;
        if let Some(w) = self.wheel.as_mut() {
            w.insert(effective.0, (id, generation));
        }
        Ok(generation)
    }

    /// Cancels the pending generation, if any.
    pub fn disarm(&mut self, id: CellId) -> Result<(), TimerError> {
        let cell = self.cell_mut(id)?;
        if cell.deadline.take().is_some() {
            cell.generation += 1;
        }
        Ok(())
    }

    pub fn generation(&self, id: CellId) -> Option<u64> {
        self.cells.get(id.0).map(|c| c.generation)
    }

    pub fn deadline(&self, id: CellId) -> Option<Timestamp> {
        self.cells.get(id.0).and_then(|c| c.deadline)
    }

    fn is_live(&self, id: CellId, generation: u64, deadline: u64) -> bool {
        let c = &self.cells[id.0];
        c.generation == generation && c.deadline == Some(Timestamp(deadline))
    }

    /// Earliest live deadline.
    pub fn next_deadline(&mut self) -> Option<Timestamp> {
        let cells = &self.cells;
        match self.wheel.as_mut() {
            None => cells.iter().filter_map(|c| c.deadline).min(),
            Some(w) => w
                .next_live(|d, &(id, g)| {
                    let c = &cells[id.0];
                    c.generation == g && c.deadline == Some(Timestamp(d))
                })
                .map(Timestamp),
        }
    }

    /// Fires every live cell whose deadline is `<= now`, auto-disarming it.
    /// Notifications are ordered by (deadline, cell).
    pub fn expire(&mut self, now: Timestamp) -> Vec<Notification> {
        let mut fired = Vec::new();
        match self.wheel.as_mut() {
            None => {
                for (i, c) in self.cells.iter_mut().enumerate() {
                    if let Some(d) = c.deadline {
                        if d <= now {
                            c.deadline = None;
                            fired.push(Notification {
                                cell: CellId(i),
                                owner: c.owner,
                                generation: c.generation,
                                deadline: d,
                                fired_at: now,
                            });
                        }
                    }
                }
            }
            Some(w) => {
                let mut out = std::mem::take(&mut self.scratch);
                out.clear();
                w.advance(now.0, &mut out);
                for &(d, (id, g)) in &out {
                    if self.is_live(id, g, d) {
                        let c = &mut self.cells[id.0];
                        c.deadline = None;
                        fired.push(Notification {
                            cell: id,
                            owner: c.owner,
                            generation: g,
                            deadline: Timestamp(d),
                            fired_at: now,
                        });
                    }
                }
                self.scratch = out;
            }
        }
        fired.sort_by_key(|n| (n.deadline, n.cell));
        fired
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{EventKind, EventQueue};

    fn timer(use_wheel: bool) -> SimTimer {
        let mut t = SimTimer::new(TimerConfig {
            use_wheel,
            capacity: 2048,
            ..Default::default()
        })
        .unwrap();
        t.init().unwrap();
        t
    }

    /// Drives a SimTimer through an event queue; returns all notifications.
    fn drain(t: &mut SimTimer, q: &mut EventQueue<()>) -> Vec<Notification> {
        let mut all = Vec::new();
        while let Some(d) = t.next_deadline() {
            q.advance_to(d);
            all.extend(t.expire(q.now()));
        }
        all
    }

    #[test]
    fn double_init_fails() {
        let mut t = SimTimer::new(TimerConfig::default()).unwrap();
        t.init().unwrap();
        assert_eq!(t.init(), Err(TimerError::AlreadyInitialized));
    }

    #[test]
    fn init_then_nothing_fires() {
        let mut t = timer(false);
        assert_eq!(t.next_deadline(), None);
        assert!(t.expire(Timestamp::from_secs(100)).is_empty());
    }

    #[test]
    fn registration_and_capacity() {
        let mut t = SimTimer::new(TimerConfig {
            capacity: 2,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(t.register(0), Err(TimerError::NotRunning));
        t.init().unwrap();
        let a = t.register(1).unwrap();
        let b = t.register(2).unwrap();
        assert_ne!(a, b);
        assert_eq!(t.register(3), Err(TimerError::CapacityExceeded(2)));
        assert!(t.expire(Timestamp::from_secs(1)).is_empty());
    }

    #[test]
    fn fires_at_exact_deadline() {
        for wheel in [false, true] {
            let mut t = timer(wheel);
            let mut q = EventQueue::<()>::new();
            q.schedule(Timestamp::from_micros(7), EventKind::Custom, ())
                .unwrap();
            q.pop();
            let c = t.register(9).unwrap();
            let now = q.now();
            t.arm(c, now + 30_000, now).unwrap();
            let n = drain(&mut t, &mut q);
            assert_eq!(n.len(), 1);
            assert_eq!(n[0].fired_at, Timestamp::from_micros(37));
            assert_eq!(n[0].deadline, n[0].fired_at);
            assert_eq!(n[0].owner, 9);
        }
    }

    #[test]
    fn past_deadline_fires_at_next_observation() {
        for wheel in [false, true] {
            let mut t = timer(wheel);
            let c = t.register(0).unwrap();
            let now = Timestamp::from_micros(100);
            t.arm(c, Timestamp::from_micros(95), now).unwrap();
            assert_eq!(t.next_deadline(), Some(now));
            let n = t.expire(now);
            assert_eq!(n.len(), 1);
            assert_eq!(n[0].fired_at, now);
        }
    }

    #[test]
    fn rearm_supersedes() {
        for wheel in [false, true] {
            let mut t = timer(wheel);
            let mut q = EventQueue::<()>::new();
            let c = t.register(0).unwrap();
            t.arm(c, Timestamp::from_micros(50), q.now()).unwrap();
            let g2 = t.arm(c, Timestamp::from_micros(80), q.now()).unwrap();
            let n = drain(&mut t, &mut q);
            assert_eq!(n.len(), 1);
            assert_eq!(n[0].generation, g2);
            assert_eq!(n[0].fired_at, Timestamp::from_micros(80));
        }
    }

    #[test]
    fn disarm_cases() {
        for wheel in [false, true] {
            let mut t = timer(wheel);
            let mut q = EventQueue::<()>::new();
            let c = t.register(0).unwrap();
            // disarmed cell: no-op
            t.disarm(c).unwrap();
            assert_eq!(t.generation(c), Some(0));
            // arm then disarm: nothing fires
            t.arm(c, Timestamp::from_micros(10), q.now()).unwrap();
            t.disarm(c).unwrap();
            assert!(drain(&mut t, &mut q).is_empty());
            // fire then disarm: the fired notification stands
            t.arm(c, Timestamp::from_micros(20), q.now()).unwrap();
            let n = drain(&mut t, &mut q);
            assert_eq!(n.len(), 1);
            let g = t.generation(c).unwrap();
            t.disarm(c).unwrap();
            assert_eq!(t.generation(c), Some(g));
        }
    }

    #[test]
    fn thousand_cells_fire_once_with_wheel() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut t = timer(true);
        let mut q = EventQueue::<()>::new();
        let mut expected = Vec::new();
        for i in 0..1000 {
            let c = t.register(i).unwrap();
            let at = Timestamp(rng.random_range(0..=10_000_000));
            t.arm(c, at, q.now()).unwrap();
            expected.push(at);
        }
        let n = drain(&mut t, &mut q);
        assert_eq!(n.len(), 1000);
        let mut seen = vec![0; 1000];
        for x in &n {
            seen[x.cell.0] += 1;
            assert_eq!(x.fired_at, expected[x.cell.0]);
        }
        assert!(seen.iter().all(|&s| s == 1));
    }
}
