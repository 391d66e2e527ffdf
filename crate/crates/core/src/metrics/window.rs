use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::LatencyHistogram;
use crate::clock::Timestamp;
use crate::workload::{stream_rng, StreamPurpose};

/// Default reservoir size for tail fitting.
pub const DEFAULT_RESERVOIR: usize = 4096;

/// Statistics for one controller period.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowStats {
    pub start: Timestamp,
    pub end: Timestamp,
    pub arrivals: u64,
    pub completions: u64,
    /// Offered rate over the window as a fraction of the configured max load.
    pub load: f64,
    /// Max total queued requests observed during the window.
    pub queue_length: usize,
    pub median_ns: Option<u64>,
    pub p99_ns: Option<u64>,
    /// Uniform sample of the window's tail-fitting values.
    pub latency_samples: Vec<u64>,
}

impl WindowStats {
    /// Stats carrying only the fields the quantum controller reads.
    pub fn synthetic(load: f64, queue_length: usize, latency_samples: Vec<u64>) -> Self {
        WindowStats {
            start: Timestamp::ZERO,
            end: Timestamp::ZERO,
            arrivals: 0,
            completions: latency_samples.len() as u64,
            load,
            queue_length,
            median_ns: None,
            p99_ns: None,
            latency_samples,
        }
    }
}

/// Uniform reservoir (Algorithm R).
#[derive(Clone, Debug)]
pub struct Reservoir {
    capacity: usize,
    seen: u64,
    items: Vec<u64>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Reservoir {
            capacity,
            seen: 0,
            items: Vec::with_capacity(capacity),
            rng: stream_rng(seed, StreamPurpose::Reservoir),
        }
    }

    pub fn offer(&mut self, v: u64) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(v);
        } else {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.items[j as usize] = v;
            }
        }
    }

    pub fn take(&mut self) -> Vec<u64> {
        self.seen = 0;
        std::mem::take(&mut self.items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Accumulates per-window statistics for the quantum controller.
#[derive(Clone, Debug)]
pub struct WindowCollector {
    max_load_rps: f64,
    window_start: Timestamp,
    arrivals: u64,
    completions: u64,
    current_queue: usize,
    max_queue: usize,
    hist: LatencyHistogram,
    reservoir: Reservoir,
}

impl WindowCollector {
    pub fn new(max_load_rps: f64, reservoir_size: usize, seed: u64) -> Self {
        WindowCollector {
            max_load_rps,
            window_start: Timestamp::ZERO,
            arrivals: 0,
            completions: 0,
            current_queue: 0,
            max_queue: 0,
            hist: LatencyHistogram::new(),
            reservoir: Reservoir::new(reservoir_size, seed),
        }
    }

    pub fn on_arrival(&mut self) {
        self.arrivals += 1;
    }

    pub fn on_queue_length(&mut self, len: usize) {
        self.current_queue = len;
        self.max_queue = self.max_queue.max(len);
    }

    /// `latency_ns` feeds median/p99; `tail_sample_ns` feeds the reservoir.
    pub fn on_completion(&mut self, latency_ns: u64, tail_sample_ns: u64) {
        self.completions += 1;
        self.hist.record(latency_ns);
        self.reservoir.offer(tail_sample_ns);
    }

    /// Closes the window ending at `now` and starts the next one.
    pub fn snapshot(&mut self, now: Timestamp) -> WindowStats {
        let secs = now.since(self.window_start) as f64 * 1e-9;
        let load = if secs > 0.0 && self.max_load_rps > 0.0 {
            self.arrivals as f64 / secs / self.max_load_rps
        } else {
            0.0
        };
        let stats = WindowStats {
            start: self.window_start,
            end: now,
            arrivals: self.arrivals,
            completions: self.completions,
            load,
            queue_length: self.max_queue,
            median_ns: self.hist.quantile(0.5).ok(),
            p99_ns: self.hist.quantile(0.99).ok(),
            latency_samples: self.reservoir.take(),
        };
        self.window_start = now;
        self.arrivals = 0;
        self.completions = 0;
        self.max_queue = self.current_queue;
        self.hist.clear();
        stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_window_reports_load_from_arrivals() {
        let mut c = WindowCollector::new(1_000.0, 16, 1);
        for _ in 0..500 {
            c.on_arrival();
        }
        let s = c.snapshot(Timestamp::from_secs(1));
        assert!((s.load - 0.5).abs() < 1e-12);
        assert_eq!(s.completions, 0);
        assert_eq!(s.median_ns, None);
        assert_eq!(s.p99_ns, None);
        assert!(s.latency_samples.is_empty());
    }

    #[test]
    fn snapshot_matches_hand_computation() {
        let mut c = WindowCollector::new(100.0, 1000, 1);
        for q in [1, 5, 3] {
            c.on_queue_length(q);
        }
        for us in 1..=100u64 {
            c.on_arrival();
            c.on_completion(us * 1_000, us);
        }
        let s = c.snapshot(Timestamp::from_secs(2));
        // 100 arrivals over 2s against 100 rps max.
        assert!((s.load - 0.5).abs() < 1e-12);
        assert_eq!(s.queue_length, 5);
        assert_eq!(s.completions, 100);
        let med = s.median_ns.unwrap() as f64;
        assert!((med - 50_000.0).abs() / 50_000.0 <= 0.01);
        let p99 = s.p99_ns.unwrap() as f64;
        assert!((p99 - 99_000.0).abs() / 99_000.0 <= 0.01);
        let mut samples = s.latency_samples.clone();
        samples.sort_unstable();
        assert_eq!(samples, (1..=100).collect::<Vec<_>>());
    }

    #[test]
    fn consecutive_windows_partition_the_stream() {
        let mut c = WindowCollector::new(10.0, 64, 3);
        for _ in 0..7 {
            c.on_arrival();
            c.on_completion(1_000, 1);
        }
        let a = c.snapshot(Timestamp::from_secs(1));
        for _ in 0..4 {
            c.on_arrival();
            c.on_completion(2_000, 2);
        }
        let b = c.snapshot(Timestamp::from_secs(2));
        assert_eq!(a.completions + b.completions, 11);
        assert_eq!(a.arrivals + b.arrivals, 11);
        assert!(a.latency_samples.iter().all(|&v| v == 1));
        assert!(b.latency_samples.iter().all(|&v| v == 2));
        assert_eq!(b.start, Timestamp::from_secs(1));
    }

    #[test]
    fn queue_max_carries_current_level_into_next_window() {
        let mut c = WindowCollector::new(10.0, 8, 0);
        c.on_queue_length(9);
        c.on_queue_length(4);
        assert_eq!(c.snapshot(Timestamp::from_secs(1)).queue_length, 9);
        assert_eq!(c.snapshot(Timestamp::from_secs(2)).queue_length, 4);
    }

    #[test]
    fn reservoir_is_bounded_and_uniformish() {
        let mut r = Reservoir::new(1000, 9);
        for v in 0..100_000u64 {
            r.offer(v);
        }
        let items = r.take();
        assert_eq!(items.len(), 1000);
        let mean = items.iter().sum::<u64>() as f64 / 1000.0;
        assert!((mean - 50_000.0).abs() < 3_000.0, "{mean}");
    }
}
