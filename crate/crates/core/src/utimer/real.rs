use std::cell::Cell;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread::JoinHandle;
use std::time::Duration;

use super::cell::{DeadlineCell, DISARMED};
use super::{CellId, Notification, PollMode, TimerConfig, TimerError, TimingWheel};
use crate::clock::{Clock, RealClock, Timestamp};

/// Receives notifications on the poller thread. Implementations must be quick
/// and must not block.
pub trait NotificationSink: Send + Sync {
    fn notify(&self, n: &Notification);
}

impl<F: Fn(&Notification) + Send + Sync> NotificationSink for F {
    fn notify(&self, n: &Notification) {
        self(n)
    }
}

struct Shared {
    cfg: TimerConfig,
    clock: RealClock,
    cells: Box<[DeadlineCell]>,
    sinks: Box<[OnceLock<Arc<dyn NotificationSink>>]>,
    registered: AtomicUsize,
    dirty: Box<[AtomicU64]>,
    stop: AtomicBool,
    fired: AtomicU64,
}

impl Shared {
    fn mark_dirty(&self, idx: usize) {
        self.dirty[idx / 64].fetch_or(1 << (idx % 64), Ordering::Release);
    }
}

/// Timer service backed by one dedicated poller thread.
pub struct RealTimer {
    shared: Arc<Shared>,
    poller: Mutex<Option<JoinHandle<()>>>,
    started: AtomicBool,
}

impl std::fmt::Debug for RealTimer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RealTimer")
            .field("cfg", &self.shared.cfg)
            .field(
                "registered",
                &self.shared.registered.load(Ordering::Relaxed),
            )
            .finish()
    }
}

/// Creates the service and starts its poller.
pub fn utimer_init(cfg: TimerConfig) -> Result<RealTimer, TimerError> {
    let t = RealTimer::new(cfg)?;
    t.init()?;
    Ok(t)
}

impl RealTimer {
    pub fn new(cfg: TimerConfig) -> Result<Self, TimerError> {
        cfg.validate()?;
        let cap = cfg.capacity;
        let shared = Shared {
            clock: RealClock::new(),
            cells: (0..cap).map(|_| DeadlineCell::default()).collect(),
            sinks: (0..cap).map(|_| OnceLock::new()).collect(),
            registered: AtomicUsize::new(0),
            dirty: (0..cap.div_ceil(64)).map(|_| AtomicU64::new(0)).collect(),
            stop: AtomicBool::new(false),
            fired: AtomicU64::new(0),
            cfg,
        };
        Ok(RealTimer {
            shared: Arc::new(shared),
            poller: Mutex::new(None),
            started: AtomicBool::new(false),
        })
    }

    /// Starts the poller thread; a second call fails.
    pub fn init(&self) -> Result<(), TimerError> {
        if self.started.swap(true, Ordering::AcqRel) {
            return Err(TimerError::AlreadyInitialized);
        }
        let shared = self.shared.clone();
        let handle = std::thread::Builder::new()
            .name("utimer-poller".into())
            .spawn(move || poll_loop(&shared))
            .map_err(|e| TimerError::Spawn(e.to_string()))?;
        *self.poller.lock().expect("poller lock") = Some(handle);
        Ok(())
    }

    pub fn is_running(&self) -> bool {
        self.started.load(Ordering::Acquire) && !self.shared.stop.load(Ordering::Acquire)
    }

    /// Stops and joins the poller. Idempotent.
    pub fn shutdown(&self) {
        self.shared.stop.store(true, Ordering::Release);
        if let Some(h) = self.poller.lock().expect("poller lock").take() {
            let _ = h.join();
        }
    }

    pub fn config(&self) -> &TimerConfig {
        &self.shared.cfg
    }

    /// Monotonic time on the service's clock.
    pub fn now(&self) -> Timestamp {
        self.shared.clock.now()
    }

    /// Total notifications delivered so far.
    pub fn fired(&self) -> u64 {
        self.shared.fired.load(Ordering::Relaxed)
    }

    /// Claims a disarmed cell whose notifications go to `sink`.
    pub fn register(
        &self,
        owner: u64,
        sink: Arc<dyn NotificationSink>,
    ) -> Result<RealCell, TimerError> {
        if !self.is_running() {
            return Err(TimerError::NotRunning);
        }
        let sh = &self.shared;
        let cap = sh.cells.len();
        let idx = sh
            .registered
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| {
                (n < cap).then_some(n + 1)
            })
            .map_err(|_| TimerError::CapacityExceeded(cap))?;
        sh.cells[idx].set_owner(owner);
        let _ = sh.sinks[idx].set(sink);
        Ok(RealCell {
            shared: sh.clone(),
            idx,
            _not_sync: PhantomData,
        })
    }
}

impl Drop for RealTimer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::Release);
        if let Ok(mut g) = self.poller.lock() {
            if let Some(h) = g.take() {
                let _ = h.join();
            }
        }
    }
}

/// Owner handle to a registered cell. It can move to the owning thread but
/// is not shareable, which keeps each cell single-writer.
pub struct RealCell {
    shared: Arc<Shared>,
    idx: usize,
    _not_sync: PhantomData<Cell<()>>,
}

impl std::fmt::Debug for RealCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RealCell").field("idx", &self.idx).finish()
    }
}

impl RealCell {
    pub fn id(&self) -> CellId {
        CellId(self.idx)
    }

    pub fn owner(&self) -> u64 {
        self.shared.cells[self.idx].owner()
    }

    pub fn now(&self) -> Timestamp {
        self.shared.clock.now()
    }

    /// Arms for the absolute time `at`; returns the generation.
    pub fn arm(&self, at: Timestamp) -> u64 {
        let g = self.shared.cells[self.idx].arm(at.0);
        self.shared.mark_dirty(self.idx);
        g
    }

    /// Arms `ns` from now; returns (generation, deadline).
    pub fn arm_after(&self, ns: u64) -> (u64, Timestamp) {
        let at = self.now() + ns;
        (self.arm(at), at)
    }

    pub fn disarm(&self) {
        let c = &self.shared.cells[self.idx];
        if c.read().1 != DISARMED {
            c.disarm();
            self.shared.mark_dirty(self.idx);
        }
    }

    pub fn generation(&self) -> u64 {
        self.shared.cells[self.idx].read().0
    }

    pub fn deadline(&self) -> Option<Timestamp> {
        match self.shared.cells[self.idx].read().1 {
            DISARMED => None,
            d => Some(Timestamp(d)),
        }
    }
}

fn poll_loop(sh: &Shared) {
    let cap = sh.cells.len();
    // Generation already delivered per cell; a fired generation counts as
    // disarmed from the service's point of view.
    let mut delivered = vec![0u64; cap];
    let mut wheel = sh
        .cfg
        .use_wheel
        .then(|| TimingWheel::<(usize, u64)>::new(sh.cfg.wheel_slot, sh.cfg.wheel_slots));
    let mut due = Vec::new();
    let interval = Duration::from_nanos(sh.cfg.poll_interval);

    // Every notification of one scan carries the scan's clock reading: the
    // instant the poller saw the deadline pass.
    let fire = |i: usize, g: u64, d: u64, now: u64, delivered: &mut [u64]| {
        let Some(sink) = sh.sinks[i].get() else {
            return;
        };
        delivered[i] = g;
        let n = Notification {
            cell: CellId(i),
            owner: sh.cells[i].owner(),
            generation: g,
            deadline: Timestamp(d),
            fired_at: Timestamp(now),
        };
        sh.fired.fetch_add(1, Ordering::Relaxed);
        sink.notify(&n);
    };

    while !sh.stop.load(Ordering::Acquire) {
        let scan_start = std::time::Instant::now();
        let now = sh.clock.now().0;
        let n = sh.registered.load(Ordering::Acquire).min(cap);
        match wheel.as_mut() {
            None => {
                for i in 0..n {
                    let (g, d) = sh.cells[i].read();
                    if d != DISARMED && d <= now && delivered[i] != g {
                        fire(i, g, d, now, &mut delivered);
                    }
                }
            }
            Some(w) => {
                for (wi, word) in sh.dirty.iter().enumerate() {
                    if word.load(Ordering::Relaxed) == 0 {
                        continue;
                    }
                    let mut bits = word.swap(0, Ordering::Acquire);
                    while bits != 0 {
                        let i = wi * 64 + bits.trailing_zeros() as usize;
                        bits &= bits - 1;
                        let (g, d) = sh.cells[i].read();
                        if d != DISARMED {
                            w.insert(d, (i, g));
                        }
                    }
                }
                due.clear();
                w.advance(now, &mut due);
                for &(d, (i, g)) in &due {
                    let (cg, cd) = sh.cells[i].read();
                    if cg == g && cd == d && delivered[i] != g {
                        fire(i, g, d, now, &mut delivered);
                    }
                }
            }
        }
        loop {
            match sh.cfg.poll_mode {
                PollMode::Spin => std::hint::spin_loop(),
                PollMode::Yield => std::thread::yield_now(),
            }
            if interval.is_zero()
                || scan_start.elapsed() >= interval
                || sh.stop.load(Ordering::Relaxed)
            {
                break;
            }
        }
    }
}
