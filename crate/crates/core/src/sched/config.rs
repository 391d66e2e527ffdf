use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::rt::{run_realtime, RealtimeParams};
use super::sim::{SimParams, SimScheduler};
use super::{Dispatch, Policy, RunOutcome, SchedError, SweepAxis, DEFAULT_MIN_QUANTUM_NS};
use crate::clock::Timestamp;
use crate::controller::ControllerHyperparams;
use crate::metrics::RunRecord;
use crate::preempt::rt::DEFAULT_STACK_SIZE;
use crate::preempt::{Quantum, DEFAULT_POOL_CAPACITY, DEFAULT_PREEMPT_OVERHEAD_NS};
use crate::units;
use crate::utimer::TimerConfig;
use crate::workload::{ArrivalProcess, Preset, RequestGenerator, ServiceModel};

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Sim,
    Realtime,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    RunToCompletion,
    PreemptFcfs,
    PreemptFcfsDynamic,
    RoundRobin,
}

/// Values for `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// Quanta (`"inf"`, `"20us"`, ns) or load fractions, per axis.
    pub points: Vec<serde_json::Value>,
}

/// Parameters of `bench-timer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    #[serde(with = "units::duration")]
    pub period: u64,
    pub samples: usize,
    pub cells: Vec<usize>,
    /// Arming rounds per cell count.
    pub rounds: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            period: 100_000,
            samples: 5000,
            cells: vec![1, 2, 4, 8, 16, 32, 64, 128, 256],
            rounds: 200,
        }
    }
}

/// Everything one run needs. Loaded from JSON; unknown keys are rejected and
/// durations accept `ns`/`us`/`ms`/`s` suffixes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backend: Backend,
    /// Named workload; ignored when `service` is given.
    pub workload: Option<Preset>,
    pub service: Option<ServiceModel>,
    /// Explicit arrival process; otherwise Poisson at `load`.
    pub arrivals: Option<ArrivalProcess>,
    /// Offered rate as a fraction of `workers / E[S]`.
    pub load: Option<f64>,
    pub workers: usize,
    pub dispatch: Dispatch,
    pub policy: PolicyKind,
    pub quantum: Quantum,
    /// Starting quantum of the dynamic policy; defaults to the controller's
    /// lower bound.
    #[serde(with = "units::opt_duration")]
    pub initial_quantum: Option<u64>,
    #[serde(with = "units::duration")]
    pub min_quantum: u64,
    pub controller: ControllerHyperparams,
    #[serde(with = "units::duration")]
    pub preemption_overhead: u64,
    #[serde(with = "units::duration")]
    pub horizon: u64,
    /// Keep running after the horizon until admitted requests finish.
    pub drain: bool,
    pub max_requests: Option<u64>,
    pub seed: u64,
    #[serde(with = "units::duration")]
    pub slo: u64,
    pub queue_capacity: Option<usize>,
    pub pool_capacity: usize,
    pub stack_size: usize,
    pub timer: TimerConfig,
    pub output: Option<PathBuf>,
    pub sweep: Option<SweepSpec>,
    pub bench: BenchSpec,
    /// Bin width of the co-location timeline.
    #[serde(with = "units::duration")]
    pub timeline_bin: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            backend: Backend::Sim,
            workload: Some(Preset::B),
            service: None,
            arrivals: None,
            load: None,
            workers: 4,
            dispatch: Dispatch::RoundRobin,
            policy: PolicyKind::RunToCompletion,
            quantum: Quantum::Finite(30_000),
            initial_quantum: None,
            min_quantum: DEFAULT_MIN_QUANTUM_NS,
            controller: ControllerHyperparams::default(),
            preemption_overhead: DEFAULT_PREEMPT_OVERHEAD_NS,
            horizon: 1_000_000_000,
            drain: false,
            max_requests: None,
            seed: 1,
            slo: 50_000,
            queue_capacity: None,
            pool_capacity: DEFAULT_POOL_CAPACITY,
            stack_size: DEFAULT_STACK_SIZE,
            timer: TimerConfig::default(),
            output: None,
            sweep: None,
            bench: BenchSpec::default(),
            timeline_bin: 100_000_000,
        }
    }
}

/// Load used when neither `load` nor `arrivals` is set.
const DEFAULT_LOAD: f64 = 0.5;

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, SchedError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| SchedError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn service_model(&self) -> Result<ServiceModel, SchedError> {
        match (&self.service, self.workload) {
            (Some(m), _) => Ok(m.clone()),
            (None, Some(p)) => Ok(p.service_model(Timestamp(self.horizon))),
            (None, None) => Err(SchedError::Config(
                "either workload or service must be set".into(),
            )),
        }
    }

    /// Label for summary rows.
    pub fn workload_name(&self) -> String {
        match (&self.service, self.workload) {
            (None, Some(p)) => p.name().to_string(),
            _ => "custom".into(),
        }
    }

    /// `workers / E[S]` in requests per second.
    pub fn max_load_rps(&self) -> Result<f64, SchedError> {
        Ok(self.workers as f64 * 1e9 / self.service_model()?.mean_ns())
    }

    pub fn arrival_process(&self) -> Result<ArrivalProcess, SchedError> {
        if let Some(a) = &self.arrivals {
            return Ok(a.clone());
        }
        let load = self.load.unwrap_or(DEFAULT_LOAD);
        Ok(ArrivalProcess::Poisson {
            rate: load * self.max_load_rps()?,
        })
    }

    /// Offered mean rate over `workers / E[S]`.
    pub fn load_fraction(&self) -> Result<f64, SchedError> {
        Ok(self.arrival_process()?.mean_rate() / self.max_load_rps()?)
    }

    pub fn policy(&self) -> Policy {
        match self.policy {
            PolicyKind::RunToCompletion => Policy::RunToCompletion,
            PolicyKind::PreemptFcfs => Policy::PreemptFcfs {
                quantum: self.quantum,
            },
            PolicyKind::RoundRobin => Policy::RoundRobin {
                quantum: self.quantum,
            },
            PolicyKind::PreemptFcfsDynamic => Policy::PreemptFcfsDynamic {
                initial: self.initial_quantum.unwrap_or(self.controller.t_min),
                hyper: self.controller.clone(),
            },
        }
    }

    pub fn validate(&self) -> Result<(), SchedError> {
        let bad = |m: String| Err(SchedError::Config(m));
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        let model = self.service_model()?;
        model.validate()?;
        if let Some(a) = &self.arrivals {
            a.validate()?;
        }
        if let Some(l) = self.load {
            if !(l.is_finite() && l > 0.0) {
                return bad(format!("load {l} must be positive"));
            }
        }
        if self.timeline_bin == 0 {
            return bad("timeline_bin must be positive".into());
        }
        self.timer
            .validate()
            .map_err(|e| SchedError::Config(e.to_string()))?;
        self.sim_params()?.validate()
    }

    pub fn sim_params(&self) -> Result<SimParams, SchedError> {
        Ok(SimParams {
            workers: self.workers,
            policy: self.policy(),
            dispatch: self.dispatch,
            overhead_ns: self.preemption_overhead,
            min_quantum_ns: self.min_quantum,
            queue_capacity: self.queue_capacity,
            pool_capacity: self.pool_capacity,
            timer: self.timer.clone(),
            slo_ns: self.slo,
            max_load_rps: self.max_load_rps()?,
            seed: self.seed,
        })
    }

    pub fn realtime_params(&self) -> Result<RealtimeParams, SchedError> {
        Ok(RealtimeParams {
            workers: self.workers,
            policy: self.policy(),
            dispatch: self.dispatch,
            min_quantum_ns: self.min_quantum,
            pool_capacity: self.pool_capacity.min(4096),
            stack_size: self.stack_size,
            timer: self.timer.clone(),
            slo_ns: self.slo,
            max_load_rps: self.max_load_rps()?,
            seed: self.seed,
        })
    }

    /// The seeded request stream of this config.
    pub fn requests(&self) -> Result<impl Iterator<Item = crate::workload::Request>, SchedError> {
        let generator =
            RequestGenerator::new(self.service_model()?, self.arrival_process()?, self.seed);
        Ok(generator.take(self.max_requests.unwrap_or(u64::MAX) as usize))
    }
}

/// Runs one experiment, passing each completed request to `sink`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    sink: &mut dyn FnMut(&RunRecord),
) -> Result<RunOutcome, SchedError> {
    cfg.validate()?;
    let horizon = Timestamp(cfg.horizon);
    match cfg.backend {
        Backend::Sim => {
            let mut s = SimScheduler::new(cfg.sim_params()?)?;
            Ok(s.run(cfg.requests()?, horizon, cfg.drain, sink))
        }
        Backend::Realtime => run_realtime(cfg.realtime_params()?, cfg.requests()?, horizon, sink),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_suffixed_durations() {
        let cfg = ExperimentConfig::from_json(
            r#"{"workload": "A1", "workers": 2, "policy": "preempt_fcfs",
                "quantum": "30us", "horizon": "10ms", "seed": 7, "load": 0.3}"#,
        )
        .unwrap();
        assert_eq!(cfg.horizon, 10_000_000);
        assert_eq!(cfg.quantum, Quantum::Finite(30_000));
        assert_eq!(cfg.workload, Some(Preset::A1));
        assert!((cfg.load_fraction().unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_json(r#"{"wrokers": 4}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"workers": 0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"workload": "nope"}"#).is_err());
        assert!(
            ExperimentConfig::from_json(r#"{"policy": "preempt_fcfs", "quantum": "1us"}"#).is_err()
        );
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let cfg = ExperimentConfig {
            workload: Some(Preset::A1),
            policy: PolicyKind::PreemptFcfs,
            horizon: 20_000_000,
            seed: 7,
            ..Default::default()
        };
        let run = || {
            let mut v = Vec::new();
            run_experiment(&cfg, &mut |r| v.push(r.clone())).unwrap();
            v
        };
        let a = run();
        assert!(!a.is_empty());
        assert_eq!(a, run());
    }

    #[test]
    fn zero_horizon_is_empty() {
        let cfg = ExperimentConfig {
            horizon: 0,
            ..Default::default()
        };
        let mut n = 0;
        let out = run_experiment(&cfg, &mut |_| n += 1).unwrap();
        assert_eq!(n, 0);
        assert_eq!(out.arrived, 0);
    }
}
