use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use super::{NotificationSink, RealTimer, SimTimer, TimerConfig, TimerError};
use crate::clock::{EventKind, EventQueue, Timestamp};

/// Firing errors of a periodic deadline.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionReport {
    pub period_ns: u64,
    /// Per firing: observed gap minus period, in ns.
    pub errors: Vec<i64>,
    pub mean_abs_err_ns: f64,
    /// `mean_abs_err_ns / period_ns`.
    pub rel_err: f64,
    pub p99_abs_err_ns: u64,
}

impl PrecisionReport {
    pub fn from_errors(period_ns: u64, errors: Vec<i64>) -> Self {
        let mut abs: Vec<u64> = errors.iter().map(|e| e.unsigned_abs()).collect();
        abs.sort_unstable();
        let mean = if abs.is_empty() {
            0.0
        } else {
            abs.iter().map(|&x| x as f64).sum::<f64>() / abs.len() as f64
        };
        let p99 = if abs.is_empty() {
            0
        } else {
            let rank = ((0.99 * abs.len() as f64).ceil() as usize).max(1);
            abs[rank - 1]
        };
        PrecisionReport {
            period_ns,
            errors,
            mean_abs_err_ns: mean,
            rel_err: mean / period_ns as f64,
            p99_abs_err_ns: p99,
        }
    }

    pub fn row(&self, cells: usize) -> ScalabilityRow {
        ScalabilityRow {
            cells,
            period_ns: self.period_ns,
            mean_err_ns: self.mean_abs_err_ns,
            rel_err: self.rel_err,
            p99_err_ns: self.p99_abs_err_ns,
        }
    }
}

/// One line of the timer benchmark CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalabilityRow {
    pub cells: usize,
    pub period_ns: u64,
    pub mean_err_ns: f64,
    pub rel_err: f64,
    pub p99_err_ns: u64,
}

impl ScalabilityRow {
    pub const CSV_HEADER: &'static str = "cells,period_ns,mean_err_ns,rel_err,p99_err_ns";

    pub fn write_csv_row(&self, out: &mut String) {
        let _ = writeln!(
            out,
            "{},{},{:.1},{:.6},{}",
            self.cells, self.period_ns, self.mean_err_ns, self.rel_err, self.p99_err_ns
        );
    }
}

/// Landing area for probe notifications. The measuring thread parks while it
/// waits so that it does not compete with the poller for a CPU; the sink
/// wakes it once `target` notifications have arrived.
struct Slots {
    fired_at: Vec<AtomicU64>,
    generation: Vec<AtomicU64>,
    count: AtomicUsize,
    target: AtomicUsize,
    waiter: std::thread::Thread,
}

impl Slots {
    fn new(n: usize) -> Arc<Self> {
        Arc::new(Slots {
            fired_at: (0..n).map(|_| AtomicU64::new(0)).collect(),
            generation: (0..n).map(|_| AtomicU64::new(0)).collect(),
            count: AtomicUsize::new(0),
            target: AtomicUsize::new(usize::MAX),
            waiter: std::thread::current(),
        })
    }

    fn sink(self: &Arc<Self>, j: usize) -> Arc<dyn NotificationSink> {
        let s = self.clone();
        Arc::new(move |n: &super::Notification| {
            s.fired_at[j].store(n.fired_at.0, Ordering::Relaxed);
            s.generation[j].store(n.generation, Ordering::Release);
            let c = s.count.fetch_add(1, Ordering::AcqRel) + 1;
            if c >= s.target.load(Ordering::Acquire) {
                s.waiter.unpark();
            }
        })
    }

    /// Blocks until `target` notifications have been counted in total.
    fn wait_for(&self, timer: &RealTimer, target: usize) -> Result<(), TimerError> {
        self.target.store(target, Ordering::Release);
        while self.count.load(Ordering::Acquire) < target {
            if !timer.is_running() {
                return Err(TimerError::NotRunning);
            }
            std::thread::park_timeout(std::time::Duration::from_millis(10));
        }
        Ok(())
    }
}

/// Re-arms one cell `n` times, each deadline one period after the previous
/// firing, and reports the gap errors.
pub fn measure_precision(
    timer: &RealTimer,
    period_ns: u64,
    n: usize,
) -> Result<PrecisionReport, TimerError> {
    let slots = Slots::new(1);
    let cell = timer.register(u64::MAX, slots.sink(0))?;
    let mut prev = timer.now();
    let mut errors = Vec::with_capacity(n);
    for i in 0..n {
        let g = cell.arm(prev + period_ns);
        slots.wait_for(timer, i + 1)?;
        debug_assert_eq!(slots.generation[0].load(Ordering::Acquire), g);
        let fired = Timestamp(slots.fired_at[0].load(Ordering::Relaxed));
        errors.push(fired.0 as i64 - prev.0 as i64 - period_ns as i64);
        prev = fired;
    }
    Ok(PrecisionReport::from_errors(period_ns, errors))
}

/// Arms `cells` cells for a common deadline one period ahead, `rounds`
/// times, and reports the lateness of every firing.
pub fn scalability_probe(
    timer: &RealTimer,
    cells: usize,
    period_ns: u64,
    rounds: usize,
) -> Result<ScalabilityRow, TimerError> {
    let slots = Slots::new(cells);
    let handles = (0..cells)
        .map(|j| timer.register(j as u64, slots.sink(j)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut errors = Vec::with_capacity(cells * rounds);
    for r in 0..rounds {
        let at = timer.now() + period_ns;
        for h in &handles {
            h.arm(at);
        }
        slots.wait_for(timer, (r + 1) * cells)?;
        for j in 0..cells {
            let f = slots.fired_at[j].load(Ordering::Relaxed);
            errors.push(f as i64 - at.0 as i64);
        }
    }
    Ok(PrecisionReport::from_errors(period_ns, errors).row(cells))
}

/// [`measure_precision`] on the simulation timer.
pub fn measure_precision_virtual(
    cfg: TimerConfig,
    period_ns: u64,
    n: usize,
) -> Result<PrecisionReport, TimerError> {
    let mut t = SimTimer::new(cfg)?;
    t.init()?;
    let mut q = EventQueue::<()>::new();
    let c = t.register(0)?;
    let mut prev = q.now();
    let mut errors = Vec::with_capacity(n);
    for _ in 0..n {
        let at = prev + period_ns;
        t.arm(c, at, q.now())?;
        q.schedule(at, EventKind::QuantumExpiry, ())
            .expect("deadline not in the past");
        let ev = q.pop().expect("scheduled");
        for f in t.expire(ev.fire_at) {
            errors.push(f.fired_at.0 as i64 - prev.0 as i64 - period_ns as i64);
            prev = f.fired_at;
        }
    }
    Ok(PrecisionReport::from_errors(period_ns, errors))
}

/// [`scalability_probe`] on the simulation timer.
pub fn scalability_probe_virtual(
    cfg: TimerConfig,
    cells: usize,
    period_ns: u64,
    rounds: usize,
) -> Result<ScalabilityRow, TimerError> {
    let mut t = SimTimer::new(cfg)?;
    t.init()?;
    let mut q = EventQueue::<()>::new();
    let ids = (0..cells)
        .map(|j| t.register(j as u64))
        .collect::<Result<Vec<_>, _>>()?;
    let mut errors = Vec::new();
    for _ in 0..rounds {
        let at = q.now() + period_ns;
        for &c in &ids {
            t.arm(c, at, q.now())?;
        }
        while let Some(d) = t.next_deadline() {
            q.advance_to(d);
            for f in t.expire(q.now()) {
                errors.push(f.fired_at.0 as i64 - f.deadline.0 as i64);
            }
        }
    }
    Ok(PrecisionReport::from_errors(period_ns, errors).row(cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_precision_is_exact() {
        let r = measure_precision_virtual(TimerConfig::default(), 100_000, 1000).unwrap();
        assert_eq!(r.errors.len(), 1000);
        assert!(r.errors.iter().all(|&e| e == 0));
        assert_eq!(r.rel_err, 0.0);
    }

    #[test]
    fn virtual_scalability_is_zero() {
        for cells in [1, 16, 256] {
            for use_wheel in [false, true] {
                let cfg = TimerConfig {
                    use_wheel,
                    ..Default::default()
                };
                let row = scalability_probe_virtual(cfg, cells, 20_000, 3).unwrap();
                assert_eq!(row.mean_err_ns, 0.0);
                assert_eq!(row.p99_err_ns, 0);
            }
        }
    }

    #[test]
    fn report_stats() {
        let r = PrecisionReport::from_errors(100, vec![-10, 10, 0, 20]);
        assert_eq!(r.mean_abs_err_ns, 10.0);
        assert_eq!(r.rel_err, 0.1);
        assert_eq!(r.p99_abs_err_ns, 20);
        let mut s = String::new();
        r.row(1).write_csv_row(&mut s);
        assert_eq!(s, "1,100,10.0,0.100000,20\n");
    }

    #[test]
    fn real_precision_smoke() {
        let t = super::super::utimer_init(TimerConfig {
            poll_mode: super::super::PollMode::Yield,
            ..Default::default()
        })
        .unwrap();
        let r = measure_precision(&t, 100_000, 50).unwrap();
        assert_eq!(r.errors.len(), 50);
        let row = scalability_probe(&t, 8, 100_000, 5).unwrap();
        assert_eq!(row.cells, 8);
    }
}
