//! Latency recording, percentiles, SLO accounting and the windowed
//! statistics that feed the quantum controller.
//!
//! Percentiles are nearest-rank throughout: the q-quantile of n values is the
//! value at rank `ceil(q * n)`.

mod histogram;
mod window;

pub use histogram::{LatencyHistogram, MetricsError, BUCKET_RATIO, MAX_VALUE_NS, MIN_VALUE_NS};
pub use window::{Reservoir, WindowCollector, WindowStats, DEFAULT_RESERVOIR};

use std::fmt::Write as _;

use crate::clock::Timestamp;
use crate::workload::Class;

/// Version tag written as the first line of every CSV the crate emits.
pub const CSV_VERSION_LINE: &str = "# preemptible csv v1; percentiles: nearest-rank";

/// One completed request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunRecord {
    pub id: u64,
    pub class: Class,
    pub arrival: Timestamp,
    pub dispatched_at: Timestamp,
    pub completed_at: Timestamp,
    pub service_demand: u64,
    pub preempt_count: u32,
}

impl RunRecord {
    pub const CSV_HEADER: &'static str =
        "id,class,arrival_ns,dispatched_ns,completed_ns,service_ns,sojourn_ns,queueing_ns,preempt_count";

    /// Completion minus arrival.
    pub fn sojourn(&self) -> u64 {
        self.completed_at.since(self.arrival)
    }

    /// Time between arrival and the first slice.
    pub fn queueing_delay(&self) -> u64 {
        self.dispatched_at.since(self.arrival)
    }

    pub fn write_csv_row(&self, out: &mut String) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            self.id,
            self.class,
            self.arrival.0,
            self.dispatched_at.0,
            self.completed_at.0,
            self.service_demand,
            self.sojourn(),
            self.queueing_delay(),
            self.preempt_count
        );
    }
}

/// Fraction of records (optionally of one class) whose sojourn exceeds `slo_ns`.
pub fn slo_violation_rate(
    records: &[RunRecord],
    slo_ns: u64,
    class: Option<Class>,
) -> Result<f64, MetricsError> {
    let (mut total, mut bad) = (0u64, 0u64);
    for r in records
        .iter()
        .filter(|r| class.is_none_or(|c| r.class == c))
    {
        total += 1;
        if r.sojourn() > slo_ns {
            bad += 1;
        }
    }
    if total == 0 {
        return Err(MetricsError::NoData);
    }
    Ok(bad as f64 / total as f64)
}

/// Per-class running aggregates.
#[derive(Clone, Debug, Default)]
pub struct ClassStats {
    pub hist: LatencyHistogram,
    pub slo_violations: u64,
    pub preempts: u64,
}

impl ClassStats {
    pub fn count(&self) -> u64 {
        self.hist.count()
    }

    pub fn slo_violation_rate(&self) -> Result<f64, MetricsError> {
        if self.count() == 0 {
            return Err(MetricsError::NoData);
        }
        Ok(self.slo_violations as f64 / self.count() as f64)
    }
}

/// Streaming aggregation of run records.
#[derive(Clone, Debug)]
pub struct SummaryBuilder {
    slo_ns: u64,
    pub lc: ClassStats,
    pub be: ClassStats,
}

impl SummaryBuilder {
    pub fn new(slo_ns: u64) -> Self {
        SummaryBuilder {
            slo_ns,
            lc: ClassStats::default(),
            be: ClassStats::default(),
        }
    }

    pub fn slo_ns(&self) -> u64 {
        self.slo_ns
    }

    pub fn push(&mut self, r: &RunRecord) {
        let s = match r.class {
            Class::LC => &mut self.lc,
            Class::BE => &mut self.be,
        };
        let sojourn = r.sojourn();
        s.hist.record(sojourn);
        s.preempts += r.preempt_count as u64;
        if sojourn > self.slo_ns {
            s.slo_violations += 1;
        }
    }

    pub fn class(&self, c: Class) -> &ClassStats {
        match c {
            Class::LC => &self.lc,
            Class::BE => &self.be,
        }
    }

    /// Both classes merged.
    pub fn total(&self) -> ClassStats {
        let mut hist = self.lc.hist.clone();
        hist.merge(&self.be.hist);
        ClassStats {
            hist,
            slo_violations: self.lc.slo_violations + self.be.slo_violations,
            preempts: self.lc.preempts + self.be.preempts,
        }
    }

    pub fn count(&self) -> u64 {
        self.lc.count() + self.be.count()
    }
}

/// One row of the summary CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub policy: String,
    pub workload: String,
    pub load_frac: f64,
    /// Nanoseconds, `inf`, or `dyn`.
    pub quantum: String,
    pub p50_ns: Option<u64>,
    pub p99_ns: Option<u64>,
    pub slo_viol_rate: Option<f64>,
    pub throughput_rps: f64,
    pub mean_preempts: f64,
    pub mean_ns: Option<f64>,
    pub completed: u64,
}

impl SummaryRow {
    pub const CSV_HEADER: &'static str = "policy,workload,load_frac,quantum_ns,p50_ns,p99_ns,slo_viol_rate,throughput_rps,mean_preempts";

    pub fn from_stats(
        policy: String,
        workload: String,
        load_frac: f64,
        quantum: String,
        stats: &ClassStats,
        horizon_ns: u64,
    ) -> Self {
        let n = stats.count();
        SummaryRow {
            policy,
            workload,
            load_frac,
            quantum,
            p50_ns: stats.hist.quantile(0.5).ok(),
            p99_ns: stats.hist.quantile(0.99).ok(),
            slo_viol_rate: stats.slo_violation_rate().ok(),
            throughput_rps: if horizon_ns > 0 {
                n as f64 / (horizon_ns as f64 * 1e-9)
            } else {
                0.0
            },
            mean_preempts: if n > 0 {
                stats.preempts as f64 / n as f64
            } else {
                0.0
            },
            mean_ns: stats.hist.mean().ok(),
            completed: n,
        }
    }

    pub fn write_csv_row(&self, out: &mut String) {
        let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{:.4},{},{},{},{},{:.1},{:.4}",
            self.policy,
            self.workload,
            self.load_frac,
            self.quantum,
            opt(self.p50_ns),
            opt(self.p99_ns),
            self.slo_viol_rate
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default(),
            self.throughput_rps,
            self.mean_preempts
        );
    }
}
