//! Real-time backend: a dispatcher on the calling thread, one OS thread per
//! worker and the timer poller. Request demands are burned with
//! [`spin_work`], so latencies are wall-clock measurements.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};

use super::{Dispatch, Policy, RunOutcome, SchedError};
use crate::clock::Timestamp;
use crate::controller::{controller_tick, QuantumController, TailSampleSource};
use crate::metrics::{RunRecord, SummaryBuilder, WindowCollector, DEFAULT_RESERVOIR};
use crate::preempt::rt::{spin_work, PreemptionWorker, RtContext};
use crate::preempt::{ContextPool, Quantum};
use crate::utimer::{utimer_init, RealTimer, TimerConfig};
use crate::workload::Request;

#[derive(Clone, Debug)]
pub struct RealtimeParams {
    pub workers: usize,
    pub policy: Policy,
    pub dispatch: Dispatch,
    pub min_quantum_ns: u64,
    pub pool_capacity: usize,
    pub stack_size: usize,
    pub timer: TimerConfig,
    pub slo_ns: u64,
    pub max_load_rps: f64,
    pub seed: u64,
}

struct Job {
    req: Request,
    ctx: Option<RtContext>,
}

const INFINITE: u64 = u64::MAX;

struct Shared {
    locals: Vec<Mutex<VecDeque<Job>>>,
    running: Mutex<VecDeque<Job>>,
    pool: ContextPool<RtContext>,
    quantum: AtomicU64,
    stop: AtomicBool,
    waiting: AtomicUsize,
    preemptions: AtomicU64,
    collector: Mutex<WindowCollector>,
    tail_source: TailSampleSource,
    round_robin: bool,
    centralized: bool,
    /// Timer-clock time corresponding to nominal arrival time zero.
    origin: u64,
}

impl Shared {
    fn queue_of(&self, w: usize) -> usize {
        if self.centralized {
            0
        } else {
            w
        }
    }

    fn take_job(&self, w: usize) -> Option<Job> {
        {
            let mut local = self.locals[self.queue_of(w)].lock().expect("local queue");
            if let Some(front) = local.front() {
                if front.ctx.is_some() {
                    return local.pop_front();
                }
                if let Ok(ctx) = self.pool.acquire() {
                    let mut job = local.pop_front().expect("front");
                    job.ctx = Some(ctx);
                    return Some(job);
                }
            }
        }
        self.running.lock().expect("running list").pop_front()
    }
}

fn worker_loop(
    w: usize,
    sh: &Shared,
    timer: &RealTimer,
    done: mpsc::Sender<RunRecord>,
) -> Result<(), SchedError> {
    let mut pw = PreemptionWorker::new(timer, w as u64)?;
    while !sh.stop.load(Ordering::Acquire) {
        let Some(mut job) = sh.take_job(w) else {
            std::thread::yield_now();
            continue;
        };
        sh.waiting.fetch_sub(1, Ordering::Relaxed);
        let quantum = match sh.quantum.load(Ordering::Relaxed) {
            INFINITE => Quantum::Infinite,
            q => Quantum::Finite(q),
        };
        let ctx = job.ctx.as_mut().expect("context");
        let outcome = if ctx.state() == crate::preempt::ContextState::Fresh {
            job.req.dispatched_at = Some(Timestamp(timer.now().0 - sh.origin));
            let demand = job.req.service_demand;
            pw.fn_launch(move || spin_work(demand), ctx, quantum)?
        } else {
            pw.fn_resume(ctx, quantum)?
        };
        job.req.preempt_count = ctx.preempt_count();
        if outcome.completed {
            let now = Timestamp(timer.now().0 - sh.origin);
            let rec = RunRecord {
                id: job.req.id,
                class: job.req.class,
                arrival: job.req.arrival,
                dispatched_at: job.req.dispatched_at.expect("dispatched"),
                completed_at: now,
                service_demand: job.req.service_demand,
                preempt_count: job.req.preempt_count,
            };
            let tail = match sh.tail_source {
                TailSampleSource::Sojourn => rec.sojourn(),
                TailSampleSource::ServiceTime => rec.service_demand,
            };
            sh.collector
                .lock()
                .expect("collector")
                .on_completion(rec.sojourn(), tail);
            sh.pool.release(job.ctx.take().expect("context"));
            let _ = done.send(rec);
        } else {
            sh.preemptions.fetch_add(1, Ordering::Relaxed);
            sh.waiting.fetch_add(1, Ordering::Relaxed);
            if sh.round_robin {
                sh.locals[sh.queue_of(w)]
                    .lock()
                    .expect("local queue")
                    .push_back(job);
            } else {
                sh.running.lock().expect("running list").push_back(job);
            }
        }
    }
    Ok(())
}

/// Runs `source` against real worker threads until `horizon` of wall time.
/// Records are handed to `sink` in completion order after the run.
pub fn run_realtime(
    p: RealtimeParams,
    source: impl Iterator<Item = Request>,
    horizon: Timestamp,
    sink: &mut dyn FnMut(&RunRecord),
) -> Result<RunOutcome, SchedError> {
    if p.workers == 0 {
        return Err(SchedError::Config("need at least one worker".into()));
    }
    p.policy.validate(p.min_quantum_ns)?;
    let timer = utimer_init(TimerConfig {
        capacity: p.timer.capacity.max(p.workers),
        ..p.timer.clone()
    })?;
    let pool = ContextPool::try_new(p.pool_capacity.max(p.workers), |id| {
        RtContext::new(id, p.stack_size)
    })?;
    let (mut controller, reservoir, tail_source) = match &p.policy {
        Policy::PreemptFcfsDynamic { initial, hyper } => (
            Some(QuantumController::new(*initial, hyper.clone(), p.workers)?),
            hyper.reservoir,
            hyper.tail_source,
        ),
        _ => (None, DEFAULT_RESERVOIR, TailSampleSource::Sojourn),
    };
    let quantum = match &p.policy {
        Policy::RunToCompletion => INFINITE,
        Policy::PreemptFcfs { quantum } | Policy::RoundRobin { quantum } => {
            quantum.as_ns().unwrap_or(INFINITE)
        }
        Policy::PreemptFcfsDynamic { .. } => controller.as_ref().expect("controller").quantum(),
    };
    let sh = Shared {
        locals: (0..p.workers)
            .map(|_| Mutex::new(VecDeque::new()))
            .collect(),
        running: Mutex::new(VecDeque::new()),
        pool,
        quantum: AtomicU64::new(quantum),
        stop: AtomicBool::new(false),
        waiting: AtomicUsize::new(0),
        preemptions: AtomicU64::new(0),
        collector: Mutex::new(WindowCollector::new(p.max_load_rps, reservoir, p.seed)),
        tail_source,
        round_robin: matches!(p.policy, Policy::RoundRobin { .. }),
        centralized: p.dispatch == Dispatch::Centralized,
        origin: timer.now().0,
    };
    let (tx, rx) = mpsc::channel();
    let mut trace = Vec::new();
    let mut arrived = 0u64;
    let worker_result = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..p.workers)
            .map(|w| {
                let tx = tx.clone();
                let (sh, timer) = (&sh, &timer);
                scope.spawn(move || worker_loop(w, sh, timer, tx))
            })
            .collect();
        let period = controller.as_ref().map(|c| c.hyper().period);
        let mut next_tick = period.map(Timestamp);
        let now = || Timestamp(timer.now().0 - sh.origin);
        let mut rr = 0;
        let mut tick = |now: Timestamp, trace: &mut Vec<_>| {
            if let (Some(t), Some(ctl)) = (next_tick, controller.as_mut()) {
                if now >= t {
                    let mut col = sh.collector.lock().expect("collector");
                    col.on_queue_length(sh.waiting.load(Ordering::Relaxed));
                    let row = controller_tick(ctl, &mut *col, now);
                    sh.quantum.store(row.quantum_ns, Ordering::Relaxed);
                    trace.push(row);
                    next_tick = Some(t + ctl.hyper().period);
                }
            }
        };
        for req in source {
            if req.arrival >= horizon {
                break;
            }
            while now() < req.arrival {
                tick(now(), &mut trace);
                std::thread::yield_now();
            }
            arrived += 1;
            sh.collector.lock().expect("collector").on_arrival();
            sh.locals[rr]
                .lock()
                .expect("local queue")
                .push_back(Job { req, ctx: None });
            let waiting = sh.waiting.fetch_add(1, Ordering::Relaxed) + 1;
            sh.collector
                .lock()
                .expect("collector")
                .on_queue_length(waiting);
            if !sh.centralized {
                rr = (rr + 1) % p.workers;
            }
        }
        while now() < horizon {
            tick(now(), &mut trace);
            std::thread::yield_now();
        }
        sh.stop.store(true, Ordering::Release);
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect::<Result<Vec<()>, SchedError>>()
    });
    drop(tx);
    timer.shutdown();
    worker_result?;
    let mut summary = SummaryBuilder::new(p.slo_ns);
    let mut completed = 0u64;
    for rec in rx.iter() {
        completed += 1;
        summary.push(&rec);
        sink(&rec);
    }
    Ok(RunOutcome {
        arrived,
        completed,
        resident: arrived - completed,
        rejected: 0,
        preemptions: sh.preemptions.load(Ordering::Relaxed),
        summary,
        trace,
        horizon,
        end: horizon,
        max_load_rps: p.max_load_rps,
    })
}
