//! Python module `pypreemptible`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use preemptible::controller::{self, ControllerHyperparams};
use preemptible::metrics::{self, ClassStats, RunRecord, WindowStats};
use preemptible::sched::{self, RunOutcome, SchedError, SloRule};
use preemptible::utimer::{self, TimerConfig};
use preemptible::workload::Class;

fn sched_err(e: SchedError) -> PyErr {
    match e {
        SchedError::Config(_) | SchedError::Workload(_) | SchedError::Controller(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Experiment configuration, built from the same JSON the CLI reads.
#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: sched::ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (json = "{}"))]
    fn new(json: &str) -> PyResult<Self> {
        let inner = sched::ExperimentConfig::from_json(json).map_err(sched_err)?;
        Ok(PyConfig { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    #[getter]
    fn workload(&self) -> String {
        self.inner.workload_name()
    }

    #[getter]
    fn workers(&self) -> usize {
        self.inner.workers
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn horizon_ns(&self) -> u64 {
        self.inner.horizon
    }

    #[setter]
    fn set_horizon_ns(&mut self, ns: u64) {
        self.inner.horizon = ns;
    }

    #[getter]
    fn load(&self) -> Option<f64> {
        self.inner.load
    }

    #[setter]
    fn set_load(&mut self, load: Option<f64>) {
        self.inner.load = load;
        if load.is_some() {
            self.inner.arrivals = None;
        }
    }

    /// Offered load in requests per second at load fraction 1.
    fn max_load_rps(&self) -> PyResult<f64> {
        self.inner.max_load_rps().map_err(sched_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "ExperimentConfig(workload={:?}, workers={}, policy={:?})",
            self.inner.workload_name(),
            self.inner.workers,
            self.inner.policy().name()
        )
    }
}

/// Latency summary of one class.
#[pyclass(name = "ClassSummary", skip_from_py_object)]
struct PyClassSummary {
    #[pyo3(get)]
    count: u64,
    #[pyo3(get)]
    mean_ns: Option<f64>,
    #[pyo3(get)]
    p50_ns: Option<u64>,
    #[pyo3(get)]
    p99_ns: Option<u64>,
    #[pyo3(get)]
    slo_violation_rate: Option<f64>,
    #[pyo3(get)]
    preemptions: u64,
}

impl From<&ClassStats> for PyClassSummary {
    fn from(s: &ClassStats) -> Self {
        PyClassSummary {
            count: s.count(),
            mean_ns: s.hist.mean().ok(),
            p50_ns: s.hist.quantile(0.5).ok(),
            p99_ns: s.hist.quantile(0.99).ok(),
            slo_violation_rate: s.slo_violation_rate().ok(),
            preemptions: s.preempts,
        }
    }
}

#[pymethods]
impl PyClassSummary {
    fn __repr__(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "None".into());
        format!(
            "ClassSummary(count={}, mean_ns={}, p99_ns={})",
            self.count,
            opt(self.mean_ns.map(|m| format!("{m:.1}"))),
            opt(self.p99_ns.map(|p| p.to_string()))
        )
    }
}

type RecordTuple = (u64, String, u64, u64, u64, u32);

/// Result of [`run`].
#[pyclass(name = "RunResult", skip_from_py_object)]
struct PyRunResult {
    outcome: RunOutcome,
    records: Option<Vec<RunRecord>>,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn arrived(&self) -> u64 {
        self.outcome.arrived
    }

    #[getter]
    fn completed(&self) -> u64 {
        self.outcome.completed
    }

    #[getter]
    fn resident(&self) -> u64 {
        self.outcome.resident
    }

    #[getter]
    fn preemptions(&self) -> u64 {
        self.outcome.preemptions
    }

    #[getter]
    fn end_ns(&self) -> u64 {
        self.outcome.end.0
    }

    /// `"all"`, `"LC"` or `"BE"`.
    #[pyo3(signature = (class_name = "all"))]
    fn summary(&self, class_name: &str) -> PyResult<PyClassSummary> {
        let s = &self.outcome.summary;
        Ok(match class_name {
            "all" => (&s.total()).into(),
            "LC" => s.class(Class::LC).into(),
            "BE" => s.class(Class::BE).into(),
            other => return Err(PyValueError::new_err(format!("unknown class {other:?}"))),
        })
    }

    /// Controller decisions as `(tick_ns, load, qlen, alpha, quantum_ns)`.
    fn trace(&self) -> Vec<(u64, f64, usize, Option<f64>, u64)> {
        self.outcome
            .trace
            .iter()
            .map(|r| (r.tick.0, r.load, r.qlen, r.alpha, r.quantum_ns))
            .collect()
    }

    /// Per-request `(id, class, arrival_ns, completed_ns, service_ns, preempts)`,
    /// or `None` unless the run kept records.
    fn records(&self) -> Option<Vec<RecordTuple>> {
        self.records.as_ref().map(|v| {
            v.iter()
                .map(|r| {
                    (
                        r.id,
                        r.class.to_string(),
                        r.arrival.0,
                        r.completed_at.0,
                        r.service_demand,
                        r.preempt_count,
                    )
                })
                .collect()
        })
    }
}

/// Runs one experiment. The GIL is released for the duration.
#[pyfunction]
#[pyo3(signature = (config, keep_records = false))]
fn run(py: Python<'_>, config: &PyConfig, keep_records: bool) -> PyResult<PyRunResult> {
    let cfg = config.inner.clone();
    let (outcome, records) = py
        .detach(move || {
            let mut kept = keep_records.then(Vec::new);
            let out = sched::run_experiment(&cfg, &mut |r| {
                if let Some(v) = kept.as_mut() {
                    v.push(r.clone());
                }
            })?;
            Ok::<_, SchedError>((out, kept))
        })
        .map_err(sched_err)?;
    Ok(PyRunResult { outcome, records })
}

/// Highest Poisson rate whose p99 stays under `p99_bound_ns`, or under 200x
/// the mean at 10% load when no bound is given.
#[pyfunction]
#[pyo3(signature = (config, p99_bound_ns = None))]
fn max_throughput(py: Python<'_>, config: &PyConfig, p99_bound_ns: Option<u64>) -> PyResult<f64> {
    let cfg = config.inner.clone();
    let rule = p99_bound_ns.map_or_else(SloRule::default, SloRule::P99Below);
    py.detach(move || sched::max_throughput(&cfg, rule))
        .map(|r| r.rate_rps)
        .map_err(sched_err)
}

/// Online quantum controller.
#[pyclass(name = "QuantumController", skip_from_py_object)]
struct PyController {
    inner: controller::QuantumController,
}

#[pymethods]
impl PyController {
    /// `hyperparams_json` uses the keys of the config controller section,
    /// e.g. `{"k1": "10us", "l_high": 0.8}`.
    #[new]
    #[pyo3(signature = (initial_ns, workers, hyperparams_json = "{}"))]
    fn new(initial_ns: u64, workers: usize, hyperparams_json: &str) -> PyResult<Self> {
        let h: ControllerHyperparams = serde_json::from_str(hyperparams_json).map_err(value_err)?;
        let inner =
            controller::QuantumController::new(initial_ns, h, workers).map_err(value_err)?;
        Ok(PyController { inner })
    }

    #[getter]
    fn quantum_ns(&self) -> u64 {
        self.inner.quantum()
    }

    #[getter]
    fn last_alpha(&self) -> Option<f64> {
        self.inner.last_alpha()
    }

    fn set_last_alpha(&mut self, alpha: Option<f64>) {
        self.inner.set_last_alpha(alpha);
    }

    /// One update from window statistics; returns the new quantum.
    #[pyo3(signature = (load, queue_length, latency_samples = Vec::new()))]
    fn update(&mut self, load: f64, queue_length: usize, latency_samples: Vec<u64>) -> u64 {
        self.inner
            .update_quantum(&WindowStats::synthetic(load, queue_length, latency_samples))
    }
}

/// Streaming log-bucket latency histogram.
#[pyclass(name = "LatencyHistogram", skip_from_py_object)]
#[derive(Default)]
struct PyHistogram {
    inner: metrics::LatencyHistogram,
}

#[pymethods]
impl PyHistogram {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    fn record(&mut self, value_ns: u64) {
        self.inner.record(value_ns);
    }

    fn extend(&mut self, values: Vec<u64>) {
        for v in values {
            self.inner.record(v);
        }
    }

    fn __len__(&self) -> usize {
        self.inner.count() as usize
    }

    fn mean(&self) -> PyResult<f64> {
        self.inner.mean().map_err(value_err)
    }

    fn quantile(&self, q: f64) -> PyResult<u64> {
        self.inner.quantile(q).map_err(value_err)
    }
}

/// Hill estimate of the tail index.
#[pyfunction]
#[pyo3(signature = (samples, k_fraction = controller::DEFAULT_K_FRACTION))]
fn estimate_tail_index(samples: Vec<u64>, k_fraction: f64) -> PyResult<f64> {
    controller::estimate_tail_index(&samples, k_fraction).map_err(value_err)
}

#[pyfunction]
fn is_heavy_tailed(alpha: f64) -> bool {
    controller::is_heavy_tailed(alpha)
}

/// Firing-gap errors of a periodic deadline, in ns. `virtual` uses the
/// simulation clock; otherwise a real poller thread runs for the duration.
#[pyfunction]
#[pyo3(signature = (period_ns, n, r#virtual = true))]
fn timer_precision(
    py: Python<'_>,
    period_ns: u64,
    n: usize,
    r#virtual: bool,
) -> PyResult<Vec<i64>> {
    py.detach(move || {
        if r#virtual {
            utimer::measure_precision_virtual(TimerConfig::default(), period_ns, n)
        } else {
            let t = utimer::utimer_init(TimerConfig::default())?;
            let r = utimer::measure_precision(&t, period_ns, n);
            t.shutdown();
            r
        }
    })
    .map(|r| r.errors)
    .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn pypreemptible(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRunResult>()?;
    m.add_class::<PyClassSummary>()?;
    m.add_class::<PyController>()?;
    m.add_class::<PyHistogram>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(max_throughput, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_tail_index, m)?)?;
    m.add_function(wrap_pyfunction!(is_heavy_tailed, m)?)?;
    m.add_function(wrap_pyfunction!(timer_precision, m)?)?;
    Ok(())
}
