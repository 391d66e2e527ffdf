use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use super::PreemptError;

/// Default number of contexts in a pool.
pub const DEFAULT_POOL_CAPACITY: usize = 65_536;

/// A context that can go back on the free list.
pub trait Poolable {
    /// Returns the context to its initial state under a new id.
    fn recycle(&mut self, new_id: u64);
}

/// Fixed set of contexts shared by all workers.
#[derive(Debug)]
pub struct ContextPool<C> {
    capacity: usize,
    free: Mutex<Vec<C>>,
    next_id: AtomicU64,
}

impl<C: Poolable> ContextPool<C> {
    /// Builds `capacity` contexts up front with `make(id)`.
    pub fn new(capacity: usize, mut make: impl FnMut(u64) -> C) -> Self {
        match Self::try_new(capacity, |id| Ok::<C, std::convert::Infallible>(make(id))) {
            Ok(p) => p,
            Err(e) => match e {},
        }
    }

    pub fn try_new<E>(
        capacity: usize,
        mut make: impl FnMut(u64) -> Result<C, E>,
    ) -> Result<Self, E> {
        let mut free = Vec::with_capacity(capacity);
        for id in (0..capacity as u64).rev() {
            free.push(make(id)?);
        }
        Ok(ContextPool {
            capacity,
            free: Mutex::new(free),
            next_id: AtomicU64::new(capacity as u64),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn available(&self) -> usize {
        self.free.lock().expect("pool lock").len()
    }

    pub fn in_use(&self) -> usize {
        self.capacity - self.available()
    }

    pub fn acquire(&self) -> Result<C, PreemptError> {
        self.free
            .lock()
            .expect("pool lock")
            .pop()
            .ok_or(PreemptError::PoolExhausted)
    }

    /// Returns a context; it comes back fresh with a new id.
    pub fn release(&self, mut ctx: C) {
        ctx.recycle(self.next_id.fetch_add(1, Ordering::Relaxed));
        let mut free = self.free.lock().expect("pool lock");
        debug_assert!(free.len() < self.capacity, "released a foreign context");
        free.push(ctx);
    }
}
