//! Adaptive time-quantum controller.
//!
//! Every period the controller looks at the last window of statistics and
//! nudges the quantum: down when load is high, when queues build up or when
//! the latency tail looks heavy; up when load is low. The quantum always stays
//! within `[t_min, t_max]`.

mod hill;

pub use hill::{estimate_tail_index, is_heavy_tailed, DEFAULT_K_FRACTION, MIN_TAIL_SAMPLES};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::metrics::{WindowStats, DEFAULT_RESERVOIR};
use crate::units;

#[derive(Debug, Error, PartialEq, Clone)]
pub enum ControllerError {
    #[error("need at least {need} samples for tail fitting, got {got}")]
    InsufficientSamples { got: usize, need: usize },
    #[error("k fraction {0} outside (0, 0.25]")]
    KFraction(f64),
    #[error("tail fitting threshold sample is not positive")]
    NonPositiveSample,
    #[error("invalid controller hyperparameters: {0}")]
    Hyperparams(String),
}

/// Which per-request value feeds the tail-index fit.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailSampleSource {
    /// Completion minus arrival.
    #[default]
    Sojourn,
    /// The request's service demand.
    ServiceTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerHyperparams {
    pub l_high: f64,
    pub l_low: f64,
    #[serde(with = "units::duration")]
    pub k1: u64,
    #[serde(with = "units::duration")]
    pub k2: u64,
    #[serde(with = "units::duration")]
    pub k3: u64,
    /// `None` resolves to twice the worker count.
    pub q_threshold: Option<usize>,
    #[serde(with = "units::duration")]
    pub t_min: u64,
    #[serde(with = "units::duration")]
    pub t_max: u64,
    #[serde(with = "units::duration")]
    pub period: u64,
    pub k_fraction: f64,
    pub reservoir: usize,
    pub tail_source: TailSampleSource,
}

impl Default for ControllerHyperparams {
    fn default() -> Self {
        ControllerHyperparams {
            l_high: 0.9,
            l_low: 0.1,
            k1: 5_000,
            k2: 5_000,
            k3: 10_000,
            q_threshold: None,
            t_min: 3_000,
            t_max: 100_000,
            period: 10_000_000_000,
            k_fraction: DEFAULT_K_FRACTION,
            reservoir: DEFAULT_RESERVOIR,
            tail_source: TailSampleSource::Sojourn,
        }
    }
}

impl ControllerHyperparams {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::Hyperparams(m.to_string()));
        if !(0.0 <= self.l_low && self.l_low < self.l_high && self.l_high <= 1.0) {
            return bad("require 0 <= l_low < l_high <= 1");
        }
        if !(0 < self.t_min && self.t_min <= self.t_max) {
            return bad("require 0 < t_min <= t_max");
        }
        if self.k1 == 0 || self.k2 == 0 || self.k3 == 0 {
            return bad("steps k1, k2, k3 must be positive");
        }
        if self.period == 0 {
            return bad("period must be positive");
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 0.25) {
            return bad("k_fraction must be in (0, 0.25]");
        }
        if self.reservoir < MIN_TAIL_SAMPLES {
            return bad("reservoir smaller than the tail-fit minimum");
        }
        Ok(())
    }

    pub fn q_threshold_for(&self, workers: usize) -> usize {
        self.q_threshold.unwrap_or(2 * workers)
    }
}

/// Controller state: the current quantum and the last fitted tail index.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantumController {
    quantum: u64,
    hyper: ControllerHyperparams,
    q_threshold: usize,
    last_alpha: Option<f64>,
}

impl QuantumController {
    /// `initial` is clamped into `[t_min, t_max]`.
    pub fn new(
        initial: u64,
        hyper: ControllerHyperparams,
        workers: usize,
    ) -> Result<Self, ControllerError> {
        hyper.validate()?;
        let q_threshold = hyper.q_threshold_for(workers);
        Ok(QuantumController {
            quantum: initial.clamp(hyper.t_min, hyper.t_max),
            hyper,
            q_threshold,
            last_alpha: None,
        })
    }

    pub fn quantum(&self) -> u64 {
        self.quantum
    }

    pub fn hyper(&self) -> &ControllerHyperparams {
        &self.hyper
    }

    pub fn q_threshold(&self) -> usize {
        self.q_threshold
    }

    pub fn last_alpha(&self) -> Option<f64> {
        self.last_alpha
    }

    pub fn set_last_alpha(&mut self, alpha: Option<f64>) {
        self.last_alpha = alpha;
    }

    /// One evaluation of the update rule; stores and returns the new quantum.
    pub fn update_quantum(&mut self, stats: &WindowStats) -> u64 {
        let h = &self.hyper;
        if stats.latency_samples.len() >= MIN_TAIL_SAMPLES {
            if let Ok(a) = estimate_tail_index(&stats.latency_samples, h.k_fraction) {
                self.last_alpha = Some(a);
            }
        }
        let heavy = self.last_alpha.is_some_and(is_heavy_tailed);

        let mut tq = self.quantum;
        if stats.load > h.l_high {
            tq = tq.saturating_sub(h.k1).max(h.t_min);
        }
        if stats.queue_length > self.q_threshold || heavy {
            tq = tq.saturating_sub(h.k2).max(h.t_min);
        }
        if stats.load < h.l_low {
            tq = tq.saturating_add(h.k3).min(h.t_max);
        }
        self.quantum = tq;
        tq
    }
}

/// Something that can close a statistics window.
pub trait WindowSource {
    fn snapshot(&mut self, now: Timestamp) -> WindowStats;
}

impl WindowSource for crate::metrics::WindowCollector {
    fn snapshot(&mut self, now: Timestamp) -> WindowStats {
        crate::metrics::WindowCollector::snapshot(self, now)
    }
}

/// One row of the controller trace CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub tick: Timestamp,
    pub load: f64,
    pub qlen: usize,
    pub median_ns: Option<u64>,
    pub p99_ns: Option<u64>,
    pub alpha: Option<f64>,
    pub quantum_ns: u64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "tick_ts,load,qlen,median_ns,p99_ns,alpha,quantum_ns";

    pub fn write_csv_row(&self, out: &mut String) {
        let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        let alpha = match self.alpha {
            Some(a) if a.is_finite() => format!("{a:.4}"),
            Some(_) => "inf".into(),
            None => String::new(),
        };
        let _ = writeln!(
            out,
            "{},{:.4},{},{},{},{},{}",
            self.tick.0,
            self.load,
            self.qlen,
            opt(self.median_ns),
            opt(self.p99_ns),
            alpha,
            self.quantum_ns
        );
    }
}

/// Closes the current window and applies one update.
///
/// A window without completions carries no latency evidence and leaves the
/// quantum untouched.
pub fn controller_tick<S: WindowSource + ?Sized>(
    ctl: &mut QuantumController,
    source: &mut S,
    now: Timestamp,
) -> TraceRow {
    let stats = source.snapshot(now);
    let quantum = if stats.completions == 0 {
        ctl.quantum()
    } else {
        ctl.update_quantum(&stats)
    };
    TraceRow {
        tick: now,
        load: stats.load,
        qlen: stats.queue_length,
        median_ns: stats.median_ns,
        p99_ns: stats.p99_ns,
        alpha: ctl.last_alpha(),
        quantum_ns: quantum,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::WindowCollector;

    fn hyper() -> ControllerHyperparams {
        ControllerHyperparams {
            k1: 10_000,
            k2: 10_000,
            ..Default::default()
        }
    }

    #[test]
    fn high_load_steps_down_by_k1() {
        let mut c = QuantumController::new(50_000, hyper(), 4).unwrap();
        let q = c.update_quantum(&WindowStats::synthetic(0.95, 0, vec![]));
        assert_eq!(q, 40_000);
    }

    #[test]
    fn heavy_tail_clamps_at_t_min() {
        let mut c = QuantumController::new(5_000, hyper(), 4).unwrap();
        c.set_last_alpha(Some(1.3));
        let q = c.update_quantum(&WindowStats::synthetic(0.5, 0, vec![]));
        assert_eq!(q, 3_000);
    }

    #[test]
    fn quiet_window_keeps_quantum() {
        let mut c = QuantumController::new(20_000, hyper(), 4).unwrap();
        c.set_last_alpha(Some(2.5));
        let q = c.update_quantum(&WindowStats::synthetic(0.5, 8, vec![]));
        assert_eq!(q, 20_000);
    }

    #[test]
    fn queue_threshold_is_strict() {
        let mut c = QuantumController::new(20_000, hyper(), 4).unwrap();
        assert_eq!(c.q_threshold(), 8);
        assert_eq!(
            c.update_quantum(&WindowStats::synthetic(0.5, 9, vec![])),
            10_000
        );
    }

    #[test]
    fn low_load_steps_up_and_clamps() {
        let mut c = QuantumController::new(95_000, ControllerHyperparams::default(), 4).unwrap();
        assert_eq!(
            c.update_quantum(&WindowStats::synthetic(0.05, 0, vec![])),
            100_000
        );
    }

    #[test]
    fn refits_alpha_from_samples() {
        let mut c = QuantumController::new(50_000, ControllerHyperparams::default(), 4).unwrap();
        let samples: Vec<u64> = (1..=1000).map(|i| 1_000_000_000 / i).collect();
        c.update_quantum(&WindowStats::synthetic(0.5, 0, samples));
        let a = c.last_alpha().unwrap();
        assert!(a < 2.0, "{a}");
        assert_eq!(c.quantum(), 45_000);
    }

    #[test]
    fn rejects_bad_hyperparams() {
        let h = ControllerHyperparams {
            l_low: 0.9,
            l_high: 0.5,
            ..Default::default()
        };
        assert!(QuantumController::new(10_000, h, 1).is_err());
        let h = ControllerHyperparams {
            t_min: 0,
            ..Default::default()
        };
        assert!(QuantumController::new(10_000, h, 1).is_err());
    }

    #[test]
    fn empty_window_tick_is_a_no_op() {
        let mut c = QuantumController::new(30_000, ControllerHyperparams::default(), 4).unwrap();
        let mut w = WindowCollector::new(1e6, 64, 0);
        let row = controller_tick(&mut c, &mut w, Timestamp::from_secs(10));
        assert_eq!(row.quantum_ns, 30_000);
        assert_eq!(c.quantum(), 30_000);
    }

    #[test]
    fn trace_row_format() {
        let row = TraceRow {
            tick: Timestamp(10),
            load: 0.5,
            qlen: 3,
            median_ns: Some(100),
            p99_ns: None,
            alpha: Some(f64::INFINITY),
            quantum_ns: 3_000,
        };
        let mut s = String::new();
        row.write_csv_row(&mut s);
        assert_eq!(s, "10,0.5000,3,100,,inf,3000\n");
    }
}
