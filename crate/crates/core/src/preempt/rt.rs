//! Real preemptible functions.
//!
//! Each context owns an mmap'd stack. A worker switches into it with
//! `swapcontext`; when the slice deadline passes, the timer poller sends
//! `SIGURG` to the worker thread and the handler switches straight back to
//! the worker's scheduler loop, leaving the interrupted frame on the
//! context's stack. Resuming returns from the handler into the work.
//!
//! The worker thread keeps `SIGURG` blocked while it runs scheduler code, so
//! the handler only ever interrupts context code. A preempted context may be
//! resumed by another worker thread.

use std::cell::Cell;
use std::marker::PhantomData;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicI32, AtomicU64, Ordering};
use std::sync::{Arc, Once};
use std::time::Instant;

use super::{ContextState, Poolable, PreemptError, Quantum, SliceOutcome};
use crate::utimer::{Notification, NotificationSink, RealCell, RealTimer};

/// Default usable stack per context.
pub const DEFAULT_STACK_SIZE: usize = 64 * 1024;
/// Signal used to interrupt a running context.
pub const PREEMPT_SIGNAL: libc::c_int = libc::SIGURG;

type Work = Box<dyn FnOnce() + Send + 'static>;

struct Stack {
    map: *mut libc::c_void,
    map_len: usize,
    guard: usize,
}

impl Stack {
    fn new(size: usize) -> Result<Self, PreemptError> {
        let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) } as usize;
        let size = size.max(16 * 1024).div_ceil(page) * page;
        let map_len = size + page;
        let map = unsafe {
            libc::mmap(
                ptr::null_mut(),
                map_len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_STACK,
                -1,
                0,
            )
        };
        if map == libc::MAP_FAILED {
            return Err(PreemptError::Setup("stack mmap failed".into()));
        }
        // Lowest page is the guard.
        if unsafe { libc::mprotect(map, page, libc::PROT_NONE) } != 0 {
            unsafe { libc::munmap(map, map_len) };
            return Err(PreemptError::Setup("stack guard mprotect failed".into()));
        }
        Ok(Stack {
            map,
            map_len,
            guard: page,
        })
    }

    fn base(&self) -> *mut libc::c_void {
        unsafe { (self.map as *mut u8).add(self.guard) as *mut libc::c_void }
    }

    fn size(&self) -> usize {
        self.map_len - self.guard
    }
}

impl Drop for Stack {
    fn drop(&mut self) {
        unsafe { libc::munmap(self.map, self.map_len) };
    }
}

/// A closure plus the stack and register state it runs on.
///
/// Dropping a context that was preempted and never finished frees its stack
/// without unwinding the interrupted frames.
pub struct RtContext {
    id: u64,
    state: ContextState,
    // Boxed: a saved ucontext points into itself.
    uc: Box<libc::ucontext_t>,
    stack: Stack,
    work: Option<Work>,
    panic: Option<String>,
    preempt_count: u32,
    quantum_used_ns: u64,
}

// The raw pointers are owned by the context and only touched by the worker
// currently holding it.
unsafe impl Send for RtContext {}

impl std::fmt::Debug for RtContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RtContext")
            .field("id", &self.id)
            .field("state", &self.state)
            .field("preempt_count", &self.preempt_count)
            .finish()
    }
}

impl RtContext {
    pub fn new(id: u64, stack_size: usize) -> Result<Self, PreemptError> {
        Ok(RtContext {
            id,
            state: ContextState::Fresh,
            uc: Box::new(unsafe { std::mem::zeroed() }),
            stack: Stack::new(stack_size)?,
            work: None,
            panic: None,
            preempt_count: 0,
            quantum_used_ns: 0,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn state(&self) -> ContextState {
        self.state
    }

    pub fn stack_size(&self) -> usize {
        self.stack.size()
    }

    pub fn preempt_count(&self) -> u32 {
        self.preempt_count
    }

    pub fn quantum_used_ns(&self) -> u64 {
        self.quantum_used_ns
    }

    pub fn is_completed(&self) -> bool {
        self.state == ContextState::Completed
    }
}

impl Poolable for RtContext {
    fn recycle(&mut self, new_id: u64) {
        self.id = new_id;
        self.state = ContextState::Fresh;
        self.work = None;
        self.panic = None;
        self.preempt_count = 0;
        self.quantum_used_ns = 0;
    }
}

/// State the poller and the signal handler share with one worker.
struct Target {
    pid: libc::pid_t,
    tid: AtomicI32,
    in_fn: AtomicBool,
    /// Generation of the slice deadline currently armed; 0 when none.
    armed_gen: AtomicU64,
    fired_gen: AtomicU64,
    signals: AtomicU64,
}

struct SwitchState {
    sched_uc: libc::ucontext_t,
    task: *mut RtContext,
    target: Arc<Target>,
    preempted: bool,
    finished: bool,
}

thread_local! {
    static CURRENT: Cell<*mut SwitchState> = const { Cell::new(ptr::null_mut()) };
}

// Never inlined, so code that resumes on another thread looks the pointer up
// again instead of reusing the old thread's TLS address.
#[inline(never)]
fn current_state() -> *mut SwitchState {
    CURRENT.with(|c| c.get())
}

fn sigmask(how: libc::c_int) {
    unsafe {
        let mut set: libc::sigset_t = std::mem::zeroed();
        libc::sigemptyset(&mut set);
        libc::sigaddset(&mut set, PREEMPT_SIGNAL);
        libc::pthread_sigmask(how, &set, ptr::null_mut());
    }
}

extern "C" fn on_preempt_signal(
    _sig: libc::c_int,
    _info: *mut libc::siginfo_t,
    _uctx: *mut libc::c_void,
) {
    unsafe {
        let errno = *libc::__errno_location();
        let st = current_state();
        if !st.is_null() {
            let t = &(*st).target;
            let armed = t.armed_gen.load(Ordering::SeqCst);
            if t.in_fn.load(Ordering::SeqCst)
                && armed != 0
                && t.fired_gen.load(Ordering::SeqCst) == armed
            {
                t.in_fn.store(false, Ordering::SeqCst);
                (*st).preempted = true;
                let task = (*st).task;
                libc::swapcontext(&mut *(*task).uc, &(*st).sched_uc);
                // Resumed, possibly on a different worker thread.
                let st = current_state();
                let target = &(*st).target;
                target.in_fn.store(true, Ordering::SeqCst);
            }
        }
        *libc::__errno_location() = errno;
    }
}

fn install_handler() {
    static INSTALL: Once = Once::new();
    INSTALL.call_once(|| unsafe {
        let mut sa: libc::sigaction = std::mem::zeroed();
        sa.sa_sigaction = on_preempt_signal as *const () as usize;
        sa.sa_flags = libc::SA_SIGINFO | libc::SA_RESTART;
        libc::sigemptyset(&mut sa.sa_mask);
        libc::sigaction(PREEMPT_SIGNAL, &sa, ptr::null_mut());
    });
}

#[inline(never)]
unsafe fn run_current_work() {
    let st = current_state();
    let work = (*(*st).task).work.take();
    let target = &(*st).target;
    target.in_fn.store(true, Ordering::SeqCst);
    sigmask(libc::SIG_UNBLOCK);
    if let Some(w) = work {
        if let Err(p) = catch_unwind(AssertUnwindSafe(w)) {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "non-string panic".into());
            let st = current_state();
            (*(*st).task).panic = Some(msg);
        }
    }
}

extern "C" fn trampoline() {
    unsafe {
        run_current_work();
        sigmask(libc::SIG_BLOCK);
        let st = current_state();
        let target = &(*st).target;
        target.in_fn.store(false, Ordering::SeqCst);
        (*st).finished = true;
        libc::setcontext(&(*st).sched_uc);
    }
    std::process::abort();
}

/// Scheduler side of one worker thread. Create it on the thread that will
/// run contexts; it cannot move to another thread.
pub struct PreemptionWorker {
    state: Box<SwitchState>,
    cell: RealCell,
    _not_send: PhantomData<*const ()>,
}

impl std::fmt::Debug for PreemptionWorker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PreemptionWorker")
            .field("tid", &self.state.target.tid.load(Ordering::Relaxed))
            .finish()
    }
}

impl PreemptionWorker {
    pub fn new(timer: &RealTimer, owner: u64) -> Result<Self, PreemptError> {
        if !current_state().is_null() {
            return Err(PreemptError::Setup(
                "thread already hosts a preemption worker".into(),
            ));
        }
        install_handler();
        sigmask(libc::SIG_BLOCK);
        let target = Arc::new(Target {
            pid: unsafe { libc::getpid() },
            tid: AtomicI32::new(unsafe { libc::gettid() }),
            in_fn: AtomicBool::new(false),
            armed_gen: AtomicU64::new(0),
            fired_gen: AtomicU64::new(0),
            signals: AtomicU64::new(0),
        });
        let t = target.clone();
        let sink: Arc<dyn NotificationSink> = Arc::new(move |n: &Notification| {
            if n.generation == t.armed_gen.load(Ordering::Acquire) {
                t.fired_gen.store(n.generation, Ordering::SeqCst);
                t.signals.fetch_add(1, Ordering::Relaxed);
                unsafe {
                    libc::syscall(
                        libc::SYS_tgkill,
                        t.pid,
                        t.tid.load(Ordering::Relaxed),
                        PREEMPT_SIGNAL,
                    );
                }
            }
        });
        let cell = timer
            .register(owner, sink)
            .map_err(|e| PreemptError::Setup(e.to_string()))?;
        let mut state = Box::new(SwitchState {
            sched_uc: unsafe { std::mem::zeroed() },
            task: ptr::null_mut(),
            target,
            preempted: false,
            finished: false,
        });
        CURRENT.with(|c| c.set(&mut *state));
        Ok(PreemptionWorker {
            state,
            cell,
            _not_send: PhantomData,
        })
    }

    /// Preemption signals sent to this worker so far.
    pub fn notifications(&self) -> u64 {
        self.state.target.signals.load(Ordering::Relaxed)
    }

    /// Runs `work` in the fresh context `ctx` for at most `timeout`.
    pub fn fn_launch(
        &mut self,
        work: impl FnOnce() + Send + 'static,
        ctx: &mut RtContext,
        timeout: Quantum,
    ) -> Result<SliceOutcome, PreemptError> {
        if ctx.state != ContextState::Fresh {
            return Err(PreemptError::InvalidState {
                id: ctx.id,
                expected: ContextState::Fresh,
                found: ctx.state,
            });
        }
        if timeout == Quantum::Finite(0) {
            return Err(PreemptError::ZeroTimeout);
        }
        ctx.work = Some(Box::new(work));
        unsafe {
            if libc::getcontext(&mut *ctx.uc) != 0 {
                return Err(PreemptError::Setup("getcontext failed".into()));
            }
            ctx.uc.uc_stack.ss_sp = ctx.stack.base();
            ctx.uc.uc_stack.ss_size = ctx.stack.size();
            ctx.uc.uc_stack.ss_flags = 0;
            ctx.uc.uc_link = ptr::null_mut();
            libc::sigaddset(&mut ctx.uc.uc_sigmask, PREEMPT_SIGNAL);
            libc::makecontext(&mut *ctx.uc, trampoline, 0);
        }
        self.slice(ctx, timeout)
    }

    /// Continues a preempted context for at most `timeout`.
    pub fn fn_resume(
        &mut self,
        ctx: &mut RtContext,
        timeout: Quantum,
    ) -> Result<SliceOutcome, PreemptError> {
        if ctx.state != ContextState::Preempted {
            return Err(PreemptError::InvalidState {
                id: ctx.id,
                expected: ContextState::Preempted,
                found: ctx.state,
            });
        }
        if timeout == Quantum::Finite(0) {
            return Err(PreemptError::ZeroTimeout);
        }
        self.slice(ctx, timeout)
    }

    fn slice(
        &mut self,
        ctx: &mut RtContext,
        timeout: Quantum,
    ) -> Result<SliceOutcome, PreemptError> {
        let st: *mut SwitchState = &mut *self.state;
        let target = self.state.target.clone();
        unsafe {
            (*st).task = ctx;
            (*st).preempted = false;
            (*st).finished = false;
        }
        ctx.state = ContextState::Running;
        if let Some(q) = timeout.as_ns() {
            target
                .armed_gen
                .store(self.cell.generation() + 1, Ordering::SeqCst);
            let (g, _) = self.cell.arm_after(q);
            debug_assert_eq!(g, target.armed_gen.load(Ordering::Relaxed));
        }
        let t0 = Instant::now();
        unsafe {
            libc::swapcontext(&mut (*st).sched_uc, &*ctx.uc);
        }
        let ran = t0.elapsed().as_nanos() as u64;
        self.cell.disarm();
        target.armed_gen.store(0, Ordering::SeqCst);
        let (finished, preempted) = unsafe { ((*st).finished, (*st).preempted) };
        unsafe { (*st).task = ptr::null_mut() };
        ctx.quantum_used_ns += ran;
        if finished {
            ctx.state = ContextState::Completed;
            if let Some(msg) = ctx.panic.take() {
                return Err(PreemptError::WorkPanicked(msg));
            }
            Ok(SliceOutcome {
                completed: true,
                ran_ns: ran,
                overhead_ns: 0,
            })
        } else {
            debug_assert!(preempted);
            ctx.state = ContextState::Preempted;
            ctx.preempt_count += 1;
            Ok(SliceOutcome {
                completed: false,
                ran_ns: ran,
                overhead_ns: 0,
            })
        }
    }
}

impl Drop for PreemptionWorker {
    fn drop(&mut self) {
        self.cell.disarm();
        CURRENT.with(|c| c.set(ptr::null_mut()));
    }
}

/// Busy-waits until `ns` of on-CPU time has passed. Gaps longer than a
/// microsecond between clock reads (descheduling, preemption) count as one
/// microsecond, so the demand is consumed only while the work is running.
pub fn spin_work(ns: u64) {
    let mut done = 0u64;
    let mut last = Instant::now();
    while done < ns {
        let now = Instant::now();
        done += (now - last).as_nanos().min(1_000) as u64;
        last = now;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::utimer::{utimer_init, PollMode, TimerConfig};
    use std::sync::atomic::AtomicUsize;
    use std::sync::mpsc;

    fn timer() -> RealTimer {
        utimer_init(TimerConfig {
            poll_mode: PollMode::Yield,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn immediate_return_needs_no_notification() {
        let t = timer();
        let mut w = PreemptionWorker::new(&t, 0).unwrap();
        let mut c = RtContext::new(1, DEFAULT_STACK_SIZE).unwrap();
        let hit = Arc::new(AtomicUsize::new(0));
        let h = hit.clone();
        let o = w
            .fn_launch(
                move || {
                    h.fetch_add(1, Ordering::Relaxed);
                },
                &mut c,
                Quantum::Finite(50_000_000),
            )
            .unwrap();
        assert!(o.completed);
        assert!(c.is_completed());
        assert_eq!(hit.load(Ordering::Relaxed), 1);
        assert_eq!(w.notifications(), 0);
        assert_eq!(c.preempt_count(), 0);
    }

    #[test]
    fn long_work_is_preempted_and_finishes() {
        let t = timer();
        let mut w = PreemptionWorker::new(&t, 0).unwrap();
        let mut c = RtContext::new(1, DEFAULT_STACK_SIZE).unwrap();
        let done = Arc::new(AtomicBool::new(false));
        let d = done.clone();
        let q = Quantum::Finite(200_000);
        let mut o = w
            .fn_launch(
                move || {
                    spin_work(20_000_000);
                    d.store(true, Ordering::SeqCst);
                },
                &mut c,
                q,
            )
            .unwrap();
        let mut slices = 1;
        while !o.completed {
            assert_eq!(c.state(), ContextState::Preempted);
            o = w.fn_resume(&mut c, q).unwrap();
            slices += 1;
        }
        assert!(done.load(Ordering::SeqCst));
        assert!(slices > 1, "never preempted");
        assert_eq!(c.preempt_count() as usize, slices - 1);
        assert!(matches!(
            w.fn_resume(&mut c, q),
            Err(PreemptError::InvalidState { .. })
        ));
    }

    #[test]
    fn preempted_context_resumes_on_another_thread() {
        let t = Arc::new(timer());
        let (tx, rx) = mpsc::channel::<RtContext>();
        let t1 = t.clone();
        let a = std::thread::spawn(move || {
            let mut w = PreemptionWorker::new(&t1, 1).unwrap();
            let mut c = RtContext::new(7, DEFAULT_STACK_SIZE).unwrap();
            let o = w
                .fn_launch(|| spin_work(30_000_000), &mut c, Quantum::Finite(500_000))
                .unwrap();
            assert!(!o.completed);
            tx.send(c).unwrap();
        });
        a.join().unwrap();
        let t2 = t.clone();
        let b = std::thread::spawn(move || {
            let mut w = PreemptionWorker::new(&t2, 2).unwrap();
            let mut c = rx.recv().unwrap();
            while !c.is_completed() {
                w.fn_resume(&mut c, Quantum::Infinite).unwrap();
            }
            c.preempt_count()
        });
        assert!(b.join().unwrap() >= 1);
    }

    #[test]
    fn round_robin_contexts_all_complete() {
        let t = timer();
        let mut w = PreemptionWorker::new(&t, 0).unwrap();
        let q = Quantum::Finite(1_000_000);
        let demands = [1_000_000u64, 5_000_000, 2_500_000];
        let mut queue = std::collections::VecDeque::new();
        let mut finished = Vec::new();
        for (i, &d) in demands.iter().enumerate() {
            let mut c = RtContext::new(i as u64, DEFAULT_STACK_SIZE).unwrap();
            if w.fn_launch(move || spin_work(d), &mut c, q)
                .unwrap()
                .completed
            {
                finished.push(i);
            } else {
                queue.push_back(c);
            }
        }
        while let Some(mut c) = queue.pop_front() {
            if w.fn_resume(&mut c, q).unwrap().completed {
                finished.push(c.id() as usize);
            } else {
                queue.push_back(c);
            }
        }
        finished.sort();
        assert_eq!(finished, vec![0, 1, 2]);
    }

    #[test]
    fn panicking_work_is_reported() {
        let t = timer();
        let mut w = PreemptionWorker::new(&t, 0).unwrap();
        let mut c = RtContext::new(1, DEFAULT_STACK_SIZE).unwrap();
        let r = w.fn_launch(|| panic!("boom"), &mut c, Quantum::Infinite);
        assert_eq!(r, Err(PreemptError::WorkPanicked("boom".into())));
        assert!(c.is_completed());
    }

    #[test]
    fn one_worker_per_thread() {
        let t = timer();
        let _w = PreemptionWorker::new(&t, 0).unwrap();
        assert!(PreemptionWorker::new(&t, 1).is_err());
    }
}
