use thiserror::Error;

/// Smallest recordable latency (ns).
pub const MIN_VALUE_NS: u64 = 100;
/// Largest recordable latency (ns).
pub const MAX_VALUE_NS: u64 = 10_000_000_000;
/// Ratio between consecutive bucket edges.
pub const BUCKET_RATIO: f64 = 1.01;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum MetricsError {
    #[error("no data recorded")]
    NoData,
    #[error("quantile {0} outside (0, 1)")]
    BadQuantile(String),
}

fn bucket_count() -> usize {
    ((MAX_VALUE_NS as f64 / MIN_VALUE_NS as f64).ln() / BUCKET_RATIO.ln()).ceil() as usize + 1
}

/// Log-bucketed latency histogram covering 100ns..10s with 1% wide buckets.
///
/// Quantiles use the nearest-rank definition, reported at the bucket
/// midpoint and clamped to the observed min/max, so a histogram of equal
/// values reports that value exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyHistogram {
    buckets: Vec<u64>,
    count: u64,
    sum: u128,
    min: u64,
    max: u64,
    out_of_span: u64,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        Self::new()
    }
}

impl LatencyHistogram {
    pub fn new() -> Self {
        LatencyHistogram {
            buckets: vec![0; bucket_count()],
            count: 0,
            sum: 0,
            min: u64::MAX,
            max: 0,
            out_of_span: 0,
        }
    }

    #[inline]
    fn index(value: u64) -> usize {
        let idx = ((value as f64 / MIN_VALUE_NS as f64).ln() / BUCKET_RATIO.ln()).floor();
        idx.max(0.0) as usize
    }

    fn lower_edge(idx: usize) -> f64 {
        MIN_VALUE_NS as f64 * BUCKET_RATIO.powi(idx as i32)
    }

    /// Records one value; out-of-span values are clamped and flagged.
    pub fn record(&mut self, value_ns: u64) {
        let clamped = value_ns.clamp(MIN_VALUE_NS, MAX_VALUE_NS);
        if clamped != value_ns {
            self.out_of_span += 1;
        }
        let idx = Self::index(clamped).min(self.buckets.len() - 1);
        self.buckets[idx] += 1;
        self.count += 1;
        self.sum += clamped as u128;
        self.min = self.min.min(clamped);
        self.max = self.max.max(clamped);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Number of values that were clamped into the span.
    pub fn out_of_span(&self) -> u64 {
        self.out_of_span
    }

    pub fn overflowed(&self) -> bool {
        self.out_of_span > 0
    }

    pub fn mean(&self) -> Result<f64, MetricsError> {
        if self.count == 0 {
            return Err(MetricsError::NoData);
        }
        Ok(self.sum as f64 / self.count as f64)
    }

    pub fn min(&self) -> Option<u64> {
        (self.count > 0).then_some(self.min)
    }

    pub fn max(&self) -> Option<u64> {
        (self.count > 0).then_some(self.max)
    }

    /// Nearest-rank quantile.
    pub fn quantile(&self, q: f64) -> Result<u64, MetricsError> {
        if !(q > 0.0 && q < 1.0) {
            return Err(MetricsError::BadQuantile(q.to_string()));
        }
        if self.count == 0 {
            return Err(MetricsError::NoData);
        }
        let rank = ((q * self.count as f64).ceil() as u64).clamp(1, self.count);
        let mut seen = 0u64;
        for (idx, &c) in self.buckets.iter().enumerate() {
            seen += c;
            if seen >= rank {
                let mid = 0.5 * (Self::lower_edge(idx) + Self::lower_edge(idx + 1));
                return Ok((mid.round() as u64).clamp(self.min, self.max));
            }
        }
        Ok(self.max)
    }

    /// Adds all of `other`'s observations.
    pub fn merge(&mut self, other: &LatencyHistogram) {
        for (a, b) in self.buckets.iter_mut().zip(&other.buckets) {
            *a += b;
        }
        self.count += other.count;
        self.sum += other.sum;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.out_of_span += other.out_of_span;
    }

    pub fn clear(&mut self) {
        self.buckets.iter_mut().for_each(|b| *b = 0);
        self.count = 0;
        self.sum = 0;
        self.min = u64::MAX;
        self.max = 0;
        self.out_of_span = 0;
    }
}
