use std::collections::VecDeque;

use super::{Dispatch, Policy, RunOutcome, SchedError, DEFAULT_MIN_QUANTUM_NS};
use crate::clock::{EventKind, EventQueue, Timestamp};
use crate::controller::{controller_tick, QuantumController, TailSampleSource, TraceRow};
use crate::metrics::{RunRecord, SummaryBuilder, WindowCollector, DEFAULT_RESERVOIR};
use crate::preempt::{
    fn_launch, fn_resume, ContextPool, ContextState, Quantum, TaskContext, DEFAULT_POOL_CAPACITY,
    DEFAULT_PREEMPT_OVERHEAD_NS,
};
use crate::utimer::{CellId, SimTimer, TimerConfig};
use crate::workload::Request;

/// Knobs of the simulated scheduler.
#[derive(Clone, Debug)]
pub struct SimParams {
    pub workers: usize,
    pub policy: Policy,
    pub dispatch: Dispatch,
    pub overhead_ns: u64,
    pub min_quantum_ns: u64,
    /// Bound on each local queue; `None` is unbounded.
    pub queue_capacity: Option<usize>,
    pub pool_capacity: usize,
    pub timer: TimerConfig,
    pub slo_ns: u64,
    /// `workers / E[S]`, used to express window load as a fraction.
    pub max_load_rps: f64,
    pub seed: u64,
}

impl SimParams {
    pub fn new(workers: usize, policy: Policy) -> Self {
        SimParams {
            workers,
            policy,
            dispatch: Dispatch::RoundRobin,
            overhead_ns: DEFAULT_PREEMPT_OVERHEAD_NS,
            min_quantum_ns: DEFAULT_MIN_QUANTUM_NS,
            queue_capacity: None,
            pool_capacity: DEFAULT_POOL_CAPACITY,
            timer: TimerConfig::default(),
            slo_ns: 50_000,
            max_load_rps: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SchedError> {
        if self.workers == 0 {
            return Err(SchedError::Config("need at least one worker".into()));
        }
        if self.queue_capacity == Some(0) {
            return Err(SchedError::Config("queue_capacity must be positive".into()));
        }
        if self.pool_capacity < self.workers {
            return Err(SchedError::Config(
                "context pool smaller than the worker count".into(),
            ));
        }
        self.policy.validate(self.min_quantum_ns)
    }
}

#[derive(Debug)]
enum Ev {
    Arrival(Request),
    SliceEnd(usize),
    TimerCheck,
    ControllerTick,
}

#[derive(Debug)]
struct Job {
    req: Request,
    ctx: Option<TaskContext>,
}

#[derive(Debug)]
struct Slice {
    job: Job,
    generation: Option<u64>,
    completed: bool,
}

#[derive(Debug)]
struct Worker {
    local: VecDeque<Job>,
    current: Option<Slice>,
    cell: CellId,
}

/// Discrete-event driver for one run.
pub struct SimScheduler {
    p: SimParams,
    q: EventQueue<Ev>,
    workers: Vec<Worker>,
    running: VecDeque<Job>,
    pool: ContextPool<TaskContext>,
    timer: SimTimer,
    rr: usize,
    controller: Option<QuantumController>,
    collector: WindowCollector,
    tail_source: TailSampleSource,
    summary: SummaryBuilder,
    trace: Vec<TraceRow>,
    waiting: usize,
    /// A worker found the context pool empty.
    starved: bool,
    arrived: u64,
    completed: u64,
    rejected: u64,
    preemptions: u64,
}

impl std::fmt::Debug for SimScheduler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimScheduler")
            .field("now", &self.q.now())
            .field("workers", &self.workers.len())
            .field("running", &self.running.len())
            .finish()
    }
}

impl SimScheduler {
    pub fn new(p: SimParams) -> Result<Self, SchedError> {
        p.validate()?;
        let mut timer = SimTimer::new(TimerConfig {
            capacity: p.timer.capacity.max(p.workers),
            ..p.timer.clone()
        })?;
        timer.init()?;
        let workers = (0..p.workers)
            .map(|w| {
                Ok(Worker {
                    local: VecDeque::new(),
                    current: None,
                    cell: timer.register(w as u64)?,
                })
            })
            .collect::<Result<Vec<_>, SchedError>>()?;
        let (controller, reservoir, tail_source) = match &p.policy {
            Policy::PreemptFcfsDynamic { initial, hyper } => (
                Some(QuantumController::new(*initial, hyper.clone(), p.workers)?),
                hyper.reservoir,
                hyper.tail_source,
            ),
            _ => (None, DEFAULT_RESERVOIR, TailSampleSource::Sojourn),
        };
        Ok(SimScheduler {
            q: EventQueue::new(),
            workers,
            running: VecDeque::new(),
            pool: ContextPool::new(p.pool_capacity, TaskContext::new),
            timer,
            rr: 0,
            controller,
            collector: WindowCollector::new(p.max_load_rps, reservoir, p.seed),
            tail_source,
            summary: SummaryBuilder::new(p.slo_ns),
            trace: Vec::new(),
            waiting: 0,
            starved: false,
            arrived: 0,
            completed: 0,
            rejected: 0,
            preemptions: 0,
            p,
        })
    }

    pub fn now(&self) -> Timestamp {
        self.q.now()
    }

    pub fn local_queue_len(&self, worker: usize) -> usize {
        self.workers[worker].local.len()
    }

    /// Queue worker `w` takes new requests from.
    fn queue_of(&self, w: usize) -> usize {
        match self.p.dispatch {
            Dispatch::RoundRobin => w,
            Dispatch::Centralized => 0,
        }
    }

    pub fn running_list_len(&self) -> usize {
        self.running.len()
    }

    pub fn is_idle(&self, worker: usize) -> bool {
        self.workers[worker].current.is_none()
    }

    /// Quantum for a slice starting now.
    pub fn current_quantum(&self) -> Quantum {
        match &self.p.policy {
            Policy::RunToCompletion => Quantum::Infinite,
            Policy::PreemptFcfs { quantum } | Policy::RoundRobin { quantum } => *quantum,
            Policy::PreemptFcfsDynamic { .. } => {
                Quantum::Finite(self.controller.as_ref().expect("controller").quantum())
            }
        }
    }

    fn note_queue(&mut self) {
        self.collector.on_queue_length(self.waiting);
    }

    /// Places `req` on the next worker's local queue (the shared queue when
    /// centralized) without starting it. Returns the worker that should look
    /// at it first.
    pub fn dispatch(&mut self, req: Request) -> Result<usize, SchedError> {
        let w = match self.p.dispatch {
            Dispatch::RoundRobin => {
                let w = self.rr;
                self.rr = (self.rr + 1) % self.workers.len();
                w
            }
            Dispatch::Centralized => 0,
        };
        if let Some(cap) = self.p.queue_capacity {
            if self.workers[w].local.len() >= cap {
                return Err(SchedError::AdmissionQueueFull { worker: w });
            }
        }
        self.workers[w].local.push_back(Job { req, ctx: None });
        self.waiting += 1;
        self.note_queue();
        if self.p.dispatch == Dispatch::Centralized {
            return Ok((0..self.workers.len())
                .find(|&i| self.workers[i].current.is_none())
                .unwrap_or(0));
        }
        Ok(w)
    }

    fn next_job(&mut self, w: usize) -> Option<Job> {
        let qi = self.queue_of(w);
        let worker = &mut self.workers[qi];
        if let Some(front) = worker.local.front() {
            if front.ctx.is_some() {
                return worker.local.pop_front();
            }
            match self.pool.acquire() {
                Ok(ctx) => {
                    let mut job = worker.local.pop_front().expect("front");
                    job.ctx = Some(ctx);
                    return Some(job);
                }
                Err(_) => self.starved = true,
            }
        }
        self.running.pop_front()
    }

    /// Starts the next slice on an idle worker; no-op if busy or nothing waits.
    pub fn worker_step(&mut self, w: usize) {
        if self.workers[w].current.is_some() {
            return;
        }
        let Some(mut job) = self.next_job(w) else {
            return;
        };
        self.waiting -= 1;
        self.note_queue();
        let now = self.q.now();
        let quantum = self.current_quantum();
        let ctx = job.ctx.as_mut().expect("job has a context");
        let outcome = if ctx.state == ContextState::Fresh {
            job.req.dispatched_at = Some(now);
            fn_launch(ctx, job.req.service_demand, quantum, self.p.overhead_ns)
        } else {
            fn_resume(ctx, quantum, self.p.overhead_ns)
        }
        .expect("context state follows the scheduler");
        job.req.remaining = ctx.remaining_ns;
        job.req.preempt_count = ctx.preempt_count;
        let generation = if outcome.completed {
            self.q
                .schedule(now + outcome.ran_ns, EventKind::Custom, Ev::SliceEnd(w))
                .expect("future");
            None
        } else {
            let deadline = now + outcome.ran_ns;
            let cell = self.workers[w].cell;
            let g = self
                .timer
                .arm(cell, deadline, now)
                .expect("registered cell");
            self.q
                .schedule(deadline, EventKind::QuantumExpiry, Ev::TimerCheck)
                .expect("future");
            Some(g)
        };
        self.workers[w].current = Some(Slice {
            job,
            generation,
            completed: outcome.completed,
        });
    }

    fn on_timer(&mut self) {
        let now = self.q.now();
        for n in self.timer.expire(now) {
            let w = n.owner as usize;
            let live = self.workers[w]
                .current
                .as_ref()
                .is_some_and(|s| s.generation == Some(n.generation));
            if live {
                self.q
                    .schedule(now + self.p.overhead_ns, EventKind::Custom, Ev::SliceEnd(w))
                    .expect("future");
            }
        }
    }

    fn on_slice_end(&mut self, w: usize, sink: &mut dyn FnMut(&RunRecord)) {
        let now = self.q.now();
        let slice = self.workers[w].current.take().expect("slice in flight");
        let mut job = slice.job;
        if slice.completed {
            job.req.completed_at = Some(now);
            let rec = RunRecord {
                id: job.req.id,
                class: job.req.class,
                arrival: job.req.arrival,
                dispatched_at: job.req.dispatched_at.expect("dispatched"),
                completed_at: now,
                service_demand: job.req.service_demand,
                preempt_count: job.req.preempt_count,
            };
            self.completed += 1;
            self.summary.push(&rec);
            let tail = match self.tail_source {
                TailSampleSource::Sojourn => rec.sojourn(),
                TailSampleSource::ServiceTime => rec.service_demand,
            };
            self.collector.on_completion(rec.sojourn(), tail);
            sink(&rec);
            self.pool.release(job.ctx.take().expect("context"));
            self.worker_step(w);
            if std::mem::take(&mut self.starved) {
                for i in 0..self.workers.len() {
                    self.worker_step(i);
                }
            }
        } else {
            self.preemptions += 1;
            self.waiting += 1;
            if matches!(self.p.policy, Policy::RoundRobin { .. }) {
                let qi = self.queue_of(w);
                self.workers[qi].local.push_back(job);
                self.note_queue();
                self.worker_step(w);
            } else {
                self.running.push_back(job);
                self.note_queue();
                self.worker_step(w);
                for i in 0..self.workers.len() {
                    if self.running.is_empty() {
                        break;
                    }
                    self.worker_step(i);
                }
            }
        }
    }

    /// Feeds `source` (sorted by arrival) until `horizon`; with `drain`,
    /// keeps going after the horizon until every admitted request finishes.
    pub fn run(
        &mut self,
        source: impl Iterator<Item = Request>,
        horizon: Timestamp,
        drain: bool,
        sink: &mut dyn FnMut(&RunRecord),
    ) -> RunOutcome {
        let mut source = source.peekable();
        fn feed<I: Iterator<Item = Request>>(
            q: &mut EventQueue<Ev>,
            source: &mut std::iter::Peekable<I>,
            horizon: Timestamp,
        ) {
            if let Some(r) = source.next_if(|r| r.arrival < horizon) {
                let at = r.arrival.max(q.now());
                q.schedule(at, EventKind::Arrival, Ev::Arrival(r))
                    .expect("future");
            }
        }
        feed(&mut self.q, &mut source, horizon);
        let period = self.controller.as_ref().map(|c| c.hyper().period);
        if let Some(period) = period {
            let first = self.q.now() + period;
            if first < horizon {
                self.q
                    .schedule(first, EventKind::ControllerTick, Ev::ControllerTick)
                    .expect("future");
            }
        }
        while let Some(t) = self.q.peek_time() {
            if t >= horizon && !drain {
                break;
            }
            let ev = self.q.pop().expect("peeked");
            match ev.payload {
                Ev::Arrival(req) => {
                    self.arrived += 1;
                    self.collector.on_arrival();
                    match self.dispatch(req) {
                        Ok(w) => self.worker_step(w),
                        Err(_) => self.rejected += 1,
                    }
                    feed(&mut self.q, &mut source, horizon);
                }
                Ev::SliceEnd(w) => self.on_slice_end(w, sink),
                Ev::TimerCheck => self.on_timer(),
                Ev::ControllerTick => {
                    let now = self.q.now();
                    let ctl = self.controller.as_mut().expect("controller");
                    let row = controller_tick(ctl, &mut self.collector, now);
                    log::debug!(
                        "tick {} load {:.3} qlen {} quantum {}",
                        now,
                        row.load,
                        row.qlen,
                        row.quantum_ns
                    );
                    self.trace.push(row);
                    let next = now + ctl.hyper().period;
                    // An empty queue means no arrivals are left and every
                    // worker is idle, so later ticks would see nothing.
                    if next < horizon && !self.q.is_empty() {
                        self.q
                            .schedule(next, EventKind::ControllerTick, Ev::ControllerTick)
                            .expect("future");
                    }
                }
            }
        }
        let resident = self.arrived - self.rejected - self.completed;
        debug_assert_eq!(
            resident as usize,
            self.waiting + self.workers.iter().filter(|w| w.current.is_some()).count()
        );
        RunOutcome {
            arrived: self.arrived,
            completed: self.completed,
            resident,
            rejected: self.rejected,
            preemptions: self.preemptions,
            summary: self.summary.clone(),
            trace: std::mem::take(&mut self.trace),
            horizon,
            end: self.q.now(),
            max_load_rps: self.p.max_load_rps,
        }
    }
}

/// Runs `requests` to completion on a fresh scheduler and returns the records
/// in completion order.
pub fn simulate_requests(
    params: SimParams,
    requests: Vec<Request>,
) -> Result<(Vec<RunRecord>, RunOutcome), SchedError> {
    let mut s = SimScheduler::new(params)?;
    let mut out = Vec::new();
    let outcome = s.run(requests.into_iter(), Timestamp::MAX, true, &mut |r| {
        out.push(r.clone())
    });
    Ok((out, outcome))
}
