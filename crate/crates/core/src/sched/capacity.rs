use super::config::{Backend, ExperimentConfig};
use super::{run_experiment, SchedError};

/// Latency bound that defines the highest sustainable load.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum SloRule {
    /// p99 at most `factor` times the mean latency measured at
    /// `reference_load`.
    TailVsLowLoadMean { factor: f64, reference_load: f64 },
    /// p99 at most a fixed bound.
    P99Below(u64),
}

impl Default for SloRule {
    fn default() -> Self {
        SloRule::TailVsLowLoadMean {
            factor: 200.0,
            reference_load: 0.1,
        }
    }
}

/// Result of [`max_throughput`].
#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputSearch {
    pub rate_rps: f64,
    pub load_frac: f64,
    pub p99_bound_ns: f64,
    /// `(load fraction, p99 ns, accepted)` for each evaluated point.
    pub evaluations: Vec<(f64, Option<u64>, bool)>,
}

/// Search resolution as a fraction of `workers / E[S]`.
const RESOLUTION: f64 = 0.01;

/// Bisects over offered load (Poisson arrivals) for the highest rate whose
/// p99 sojourn meets `rule`, on the simulation backend. A point also fails if
/// the backlog left at the horizon shows the system is unstable.
pub fn max_throughput(
    cfg: &ExperimentConfig,
    rule: SloRule,
) -> Result<ThroughputSearch, SchedError> {
    let mut base = cfg.clone();
    base.backend = Backend::Sim;
    base.arrivals = None;
    base.drain = false;
    let cap = base.max_load_rps()?;
    let run_at = |load: f64| -> Result<(Option<u64>, Option<f64>, bool), SchedError> {
        let c = ExperimentConfig {
            load: Some(load),
            ..base.clone()
        };
        let out = run_experiment(&c, &mut |_| {})?;
        let total = out.summary.total();
        let backlog_ok =
            (out.resident as f64) <= 0.01 * out.arrived as f64 + 10.0 * c.workers as f64;
        Ok((
            total.hist.quantile(0.99).ok(),
            total.hist.mean().ok(),
            backlog_ok,
        ))
    };

    let (lo_start, bound) = match rule {
        SloRule::P99Below(b) => (RESOLUTION, b as f64),
        SloRule::TailVsLowLoadMean {
            factor,
            reference_load,
        } => {
            let (_, mean, _) = run_at(reference_load)?;
            let mean = mean
                .ok_or_else(|| SchedError::Config("no completions at the reference load".into()))?;
            (reference_load, factor * mean)
        }
    };

    let mut evaluations = Vec::new();
    let feasible = |load: f64, evals: &mut Vec<_>| -> Result<bool, SchedError> {
        let (p99, _, backlog_ok) = run_at(load)?;
        let ok = backlog_ok && p99.is_some_and(|v| v as f64 <= bound);
        evals.push((load, p99, ok));
        Ok(ok)
    };

    let (mut lo, mut hi) = (lo_start, 1.0);
    if !feasible(lo, &mut evaluations)? {
        lo = 0.0;
    } else {
        while hi - lo > RESOLUTION {
            let mid = 0.5 * (lo + hi);
            if feasible(mid, &mut evaluations)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    Ok(ThroughputSearch {
        rate_rps: lo * cap,
        load_frac: lo,
        p99_bound_ns: bound,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{ServiceDistribution, ServiceModel};

    #[test]
    fn constant_service_stays_under_capacity() {
        let cfg = ExperimentConfig {
            service: Some(ServiceModel::Single {
                service: ServiceDistribution::Constant { value: 10_000 },
            }),
            workers: 1,
            horizon: 200_000_000,
            ..Default::default()
        };
        let r = max_throughput(&cfg, SloRule::default()).unwrap();
        assert!(r.rate_rps <= 100_000.0);
        assert!(r.rate_rps > 50_000.0, "{r:?}");
    }
}
