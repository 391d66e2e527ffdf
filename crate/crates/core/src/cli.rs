//! Command-line experiment runner.
//!
//! Every subcommand reads an [`ExperimentConfig`] (JSON), runs it and writes
//! CSV files into the output directory. Each CSV starts with
//! [`CSV_VERSION_LINE`] followed by a fixed header.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::controller::TraceRow;
use crate::metrics::{ClassStats, RunRecord, SummaryRow, CSV_VERSION_LINE};
use crate::preempt::Quantum;
use crate::sched::{
    run_experiment, Backend, ExperimentConfig, PolicyKind, RunOutcome, SchedError, SweepAxis,
};
use crate::utimer::{measure_precision, scalability_probe, utimer_init, ScalabilityRow};
use crate::workload::{Class, Preset, ServiceModel};

/// Environment variable holding the log filter.
pub const LOG_ENV: &str = "PREEMPTIBLE_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "preemptible",
    version,
    about = "Preemptive scheduling experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: config `output`, else `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Skip the per-request records file.
    #[arg(long, global = true)]
    pub summary_only: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// One run: records.csv, summary.csv and controller.csv.
    Simulate,
    /// One summary row per point of the config's `sweep`.
    Sweep,
    /// Co-located LC/BE run: per-class stats and a binned timeline.
    Colocate,
    /// Timer precision and scalability on the real timer.
    BenchTimer,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<SchedError> for CliError {
    fn from(e: SchedError) -> Self {
        match e {
            SchedError::Config(_)
            | SchedError::Workload(_)
            | SchedError::Controller(_)
            | SchedError::AdmissionQueueFull { .. } => CliError::Config(e.to_string()),
            SchedError::Timer(_) | SchedError::Preempt(_) | SchedError::Io(_) => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter(LOG_ENV)).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(files) => {
            for f in files {
                log::info!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Loads the config named on the command line and applies overrides.
pub fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Runs one parsed invocation and returns the files written.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let cfg = load_config(cli)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    match cli.command {
        Command::Simulate => cmd_simulate(&cfg, &out, cli.summary_only),
        Command::Sweep => cmd_sweep(&cfg, &out),
        Command::Colocate => cmd_colocate(&cfg, &out, cli.summary_only),
        Command::BenchTimer => cmd_bench_timer(&cfg, &out, cli.summary_only),
    }
}

fn write_csv(dir: &Path, name: &str, header: &str, body: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let mut text = String::with_capacity(body.len() + 128);
    text.push_str(CSV_VERSION_LINE);
    text.push('\n');
    text.push_str(header);
    text.push('\n');
    text.push_str(body);
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

/// Streams records into a CSV while a run is in progress.
struct RecordWriter {
    path: PathBuf,
    w: std::io::BufWriter<std::fs::File>,
    line: String,
    err: Option<std::io::Error>,
}

impl RecordWriter {
    fn create(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("records.csv");
        let f = std::fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = std::io::BufWriter::new(f);
        writeln!(w, "{CSV_VERSION_LINE}\n{}", RunRecord::CSV_HEADER).map_err(io_err(&path))?;
        Ok(RecordWriter {
            path,
            w,
            line: String::new(),
            err: None,
        })
    }

    fn push(&mut self, r: &RunRecord) {
        if self.err.is_some() {
            return;
        }
        self.line.clear();
        r.write_csv_row(&mut self.line);
        if let Err(e) = self.w.write_all(self.line.as_bytes()) {
            self.err = Some(e);
        }
    }

    fn finish(mut self) -> Result<PathBuf, CliError> {
        if let Some(e) = self.err.take() {
            return Err(io_err(&self.path)(e));
        }
        self.w.flush().map_err(io_err(&self.path))?;
        Ok(self.path)
    }
}

/// Summary row of one run over the records in `stats`.
pub fn summary_row(
    cfg: &ExperimentConfig,
    out: &RunOutcome,
    stats: &ClassStats,
    workload: String,
) -> Result<SummaryRow, CliError> {
    let policy = cfg.policy();
    Ok(SummaryRow::from_stats(
        policy.name().to_string(),
        workload,
        cfg.load_fraction()?,
        policy.quantum_label(),
        stats,
        out.end.0,
    ))
}

fn trace_body(trace: &[TraceRow]) -> String {
    let mut s = String::new();
    for r in trace {
        r.write_csv_row(&mut s);
    }
    s
}

/// Runs `cfg`, optionally streaming records into `dir/records.csv`.
fn run_with_records(
    cfg: &ExperimentConfig,
    dir: &Path,
    records: bool,
    files: &mut Vec<PathBuf>,
    extra: &mut dyn FnMut(&RunRecord),
) -> Result<RunOutcome, CliError> {
    let mut writer = if records {
        Some(RecordWriter::create(dir)?)
    } else {
        None
    };
    let out = run_experiment(cfg, &mut |r| {
        if let Some(w) = writer.as_mut() {
            w.push(r);
        }
        extra(r);
    })?;
    if let Some(w) = writer {
        files.push(w.finish()?);
    }
    log::info!(
        "arrived {} completed {} resident {} preemptions {}",
        out.arrived,
        out.completed,
        out.resident,
        out.preemptions
    );
    Ok(out)
}

pub fn cmd_simulate(
    cfg: &ExperimentConfig,
    dir: &Path,
    summary_only: bool,
) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    let out = run_with_records(cfg, dir, !summary_only, &mut files, &mut |_| {})?;
    let row = summary_row(cfg, &out, &out.summary.total(), cfg.workload_name())?;
    let mut body = String::new();
    row.write_csv_row(&mut body);
    files.push(write_csv(
        dir,
        "summary.csv",
        SummaryRow::CSV_HEADER,
        &body,
    )?);
    if cfg.policy == PolicyKind::PreemptFcfsDynamic {
        files.push(write_csv(
            dir,
            "controller.csv",
            TraceRow::CSV_HEADER,
            &trace_body(&out.trace),
        )?);
    }
    Ok(files)
}

/// The config of one sweep point.
pub fn sweep_point(
    base: &ExperimentConfig,
    axis: SweepAxis,
    point: &serde_json::Value,
) -> Result<ExperimentConfig, CliError> {
    let mut cfg = base.clone();
    cfg.sweep = None;
    match axis {
        SweepAxis::Quantum => {
            let q: Quantum = serde_json::from_value(point.clone())
                .map_err(|e| CliError::Config(format!("sweep point {point}: {e}")))?;
            match cfg.policy {
                PolicyKind::PreemptFcfsDynamic => {
                    return Err(CliError::Config(
                        "a quantum sweep needs a static policy".into(),
                    ))
                }
                PolicyKind::RunToCompletion => cfg.policy = PolicyKind::PreemptFcfs,
                PolicyKind::PreemptFcfs | PolicyKind::RoundRobin => {}
            }
            cfg.quantum = q;
        }
        SweepAxis::Load => {
            let l = point
                .as_f64()
                .ok_or_else(|| CliError::Config(format!("load point {point} is not a number")))?;
            cfg.arrivals = None;
            cfg.load = Some(l);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let spec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep requires a `sweep` section".into()))?;
    if spec.points.is_empty() {
        return Err(CliError::Config("sweep has no points".into()));
    }
    let points = spec
        .points
        .iter()
        .map(|p| sweep_point(cfg, spec.axis, p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut body = String::new();
    for c in &points {
        let out = run_experiment(c, &mut |_| {})?;
        summary_row(c, &out, &out.summary.total(), c.workload_name())?.write_csv_row(&mut body);
    }
    Ok(vec![write_csv(
        dir,
        "summary.csv",
        SummaryRow::CSV_HEADER,
        &body,
    )?])
}

/// Time-binned per-class latency and rate, keyed by arrival time.
#[derive(Clone, Debug)]
pub struct Timeline {
    bin_ns: u64,
    /// Per bin: (LC count, LC latency sum, BE count, BE latency sum).
    bins: Vec<(u64, u128, u64, u128)>,
}

impl Timeline {
    pub const CSV_HEADER: &'static str =
        "bin_start_ns,lc_mean_ns,be_mean_ns,lc_qps,be_qps,total_qps,quantum_ns";

    pub fn new(bin_ns: u64, horizon_ns: u64) -> Self {
        let n = horizon_ns.div_ceil(bin_ns.max(1)) as usize;
        Timeline {
            bin_ns: bin_ns.max(1),
            bins: vec![(0, 0, 0, 0); n],
        }
    }

    pub fn push(&mut self, r: &RunRecord) {
        let i = (r.arrival.0 / self.bin_ns) as usize;
        if i >= self.bins.len() {
            self.bins.resize(i + 1, (0, 0, 0, 0));
        }
        let b = &mut self.bins[i];
        match r.class {
            Class::LC => {
                b.0 += 1;
                b.1 += r.sojourn() as u128;
            }
            Class::BE => {
                b.2 += 1;
                b.3 += r.sojourn() as u128;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Mean LC sojourn of bin `i`.
    pub fn lc_mean(&self, i: usize) -> Option<f64> {
        let b = self.bins.get(i)?;
        (b.0 > 0).then(|| b.1 as f64 / b.0 as f64)
    }

    /// Renders the CSV body; `quantum_at` labels the quantum in force at each
    /// bin start.
    pub fn csv_body(&self, quantum_at: &dyn Fn(u64) -> String) -> String {
        let secs = self.bin_ns as f64 * 1e-9;
        let mean = |n: u64, s: u128| {
            if n == 0 {
                String::new()
            } else {
                format!("{:.1}", s as f64 / n as f64)
            }
        };
        let mut out = String::new();
        for (i, b) in self.bins.iter().enumerate() {
            let start = i as u64 * self.bin_ns;
            let _ = writeln!(
                out,
                "{},{},{},{:.1},{:.1},{:.1},{}",
                start,
                mean(b.0, b.1),
                mean(b.2, b.3),
                b.0 as f64 / secs,
                b.2 as f64 / secs,
                (b.0 + b.2) as f64 / secs,
                quantum_at(start)
            );
        }
        out
    }
}

/// Quantum in force at `t` given the controller trace.
pub fn quantum_at(cfg: &ExperimentConfig, trace: &[TraceRow], t: u64) -> String {
    match cfg.policy {
        PolicyKind::PreemptFcfsDynamic => {
            let initial = cfg.initial_quantum.unwrap_or(cfg.controller.t_min);
            trace
                .iter()
                .take_while(|r| r.tick.0 <= t)
                .last()
                .map_or(initial, |r| r.quantum_ns)
                .to_string()
        }
        _ => cfg.policy().quantum_label(),
    }
}

fn class_row(out: &mut String, label: &str, s: &ClassStats) {
    let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    let _ = writeln!(
        out,
        "{},{},{},{},{},{}",
        label,
        s.count(),
        opt(s.hist.quantile(0.5).ok()),
        opt(s.hist.quantile(0.99).ok()),
        s.hist.mean().map(|m| format!("{m:.1}")).unwrap_or_default(),
        s.slo_violation_rate()
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default()
    );
}

pub const CLASS_CSV_HEADER: &str = "class,count,p50_ns,p99_ns,mean_ns,slo_viol_rate";

pub fn cmd_colocate(
    cfg: &ExperimentConfig,
    dir: &Path,
    summary_only: bool,
) -> Result<Vec<PathBuf>, CliError> {
    let colocated = matches!(cfg.service_model()?, ServiceModel::Colocated { .. });
    if !colocated && cfg.workload != Some(Preset::Coloc) {
        return Err(CliError::Config(
            "colocate needs the COLOC preset or a colocated service model".into(),
        ));
    }
    let mut files = Vec::new();
    let mut timeline = Timeline::new(cfg.timeline_bin, cfg.horizon);
    let out = run_with_records(cfg, dir, !summary_only, &mut files, &mut |r| {
        timeline.push(r)
    })?;

    let mut summary = String::new();
    let name = cfg.workload_name();
    for (label, stats) in [
        ("all", out.summary.total()),
        ("LC", out.summary.lc.clone()),
        ("BE", out.summary.be.clone()),
    ] {
        summary_row(cfg, &out, &stats, format!("{name}/{label}"))?.write_csv_row(&mut summary);
    }
    files.push(write_csv(
        dir,
        "summary.csv",
        SummaryRow::CSV_HEADER,
        &summary,
    )?);

    let mut classes = String::new();
    class_row(&mut classes, "LC", &out.summary.lc);
    class_row(&mut classes, "BE", &out.summary.be);
    class_row(&mut classes, "all", &out.summary.total());
    files.push(write_csv(dir, "classes.csv", CLASS_CSV_HEADER, &classes)?);

    let body = timeline.csv_body(&|t| quantum_at(cfg, &out.trace, t));
    files.push(write_csv(dir, "timeline.csv", Timeline::CSV_HEADER, &body)?);
    if cfg.policy == PolicyKind::PreemptFcfsDynamic {
        files.push(write_csv(
            dir,
            "controller.csv",
            TraceRow::CSV_HEADER,
            &trace_body(&out.trace),
        )?);
    }
    Ok(files)
}

pub const PRECISION_SAMPLES_HEADER: &str = "sample,error_ns";

pub fn cmd_bench_timer(
    cfg: &ExperimentConfig,
    dir: &Path,
    summary_only: bool,
) -> Result<Vec<PathBuf>, CliError> {
    if cfg.backend != Backend::Realtime {
        return Err(CliError::Config(
            "bench-timer requires realtime backend".into(),
        ));
    }
    let b = &cfg.bench;
    if b.period == 0 || b.samples == 0 || b.rounds == 0 {
        return Err(CliError::Config(
            "bench period, samples and rounds must be positive".into(),
        ));
    }
    let need = 1 + b.cells.iter().sum::<usize>();
    let timer = utimer_init(crate::utimer::TimerConfig {
        capacity: cfg.timer.capacity.max(need),
        ..cfg.timer.clone()
    })
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let rt = |e: crate::utimer::TimerError| CliError::Runtime(e.to_string());

    let report = measure_precision(&timer, b.period, b.samples).map_err(rt)?;
    log::info!(
        "period {}ns: mean |err| {:.1}ns, relative {:.4}",
        b.period,
        report.mean_abs_err_ns,
        report.rel_err
    );
    let mut files = Vec::new();
    let mut body = String::new();
    report.row(1).write_csv_row(&mut body);
    files.push(write_csv(
        dir,
        "precision.csv",
        ScalabilityRow::CSV_HEADER,
        &body,
    )?);
    if !summary_only {
        let mut s = String::new();
        for (i, e) in report.errors.iter().enumerate() {
            let _ = writeln!(s, "{i},{e}");
        }
        files.push(write_csv(
            dir,
            "precision_samples.csv",
            PRECISION_SAMPLES_HEADER,
            &s,
        )?);
    }

    let mut body = String::new();
    for &cells in &b.cells {
        scalability_probe(&timer, cells, b.period, b.rounds)
            .map_err(rt)?
            .write_csv_row(&mut body);
    }
    files.push(write_csv(
        dir,
        "timer.csv",
        ScalabilityRow::CSV_HEADER,
        &body,
    )?);
    timer.shutdown();
    Ok(files)
}
