use std::sync::atomic::{fence, AtomicU64, Ordering};

/// Deadline value of a cell that is not armed.
pub const DISARMED: u64 = u64::MAX;

/// One task's deadline slot, alone in its cache line.
///
/// Writes follow a seqlock protocol: the sequence word is odd while a write
/// is in progress, and the logical generation is `seq / 2`. Only the owner
/// writes; the timer service reads `(generation, deadline)` with
/// [`DeadlineCell::read`], which never observes a torn pair.
#[repr(C, align(64))]
#[derive(Debug)]
pub struct DeadlineCell {
    seq: AtomicU64,
    deadline: AtomicU64,
    owner: AtomicU64,
}

impl Default for DeadlineCell {
    fn default() -> Self {
        DeadlineCell {
            seq: AtomicU64::new(0),
            deadline: AtomicU64::new(DISARMED),
            owner: AtomicU64::new(0),
        }
    }
}

impl DeadlineCell {
    pub fn owner(&self) -> u64 {
        self.owner.load(Ordering::Relaxed)
    }

    pub(crate) fn set_owner(&self, owner: u64) {
        self.owner.store(owner, Ordering::Relaxed);
    }

    fn write(&self, deadline: u64) -> u64 {
        let s = self.seq.load(Ordering::Relaxed);
        debug_assert!(s.is_multiple_of(2), "concurrent writers on a deadline cell");
        self.seq.store(s + 1, Ordering::Relaxed);
        fence(Ordering::Release);
        self.deadline.store(deadline, Ordering::Relaxed);
        self.seq.store(s + 2, Ordering::Release);
        (s + 2) / 2
    }

    /// Owner only. Sets the deadline (absolute ns) and returns the new generation.
    pub fn arm(&self, deadline: u64) -> u64 {
        self.write(deadline.min(DISARMED - 1))
    }

    /// Owner only. Cancels a pending deadline; a no-op on a disarmed cell.
    pub fn disarm(&self) -> u64 {
        if self.deadline.load(Ordering::Relaxed) == DISARMED {
            return self.seq.load(Ordering::Relaxed) / 2;
        }
        self.write(DISARMED)
    }

    /// Consistent `(generation, deadline)` snapshot.
    pub fn read(&self) -> (u64, u64) {
        loop {
            let s1 = self.seq.load(Ordering::Acquire);
            if s1 % 2 == 1 {
                std::hint::spin_loop();
                continue;
            }
            let d = self.deadline.load(Ordering::Relaxed);
            fence(Ordering::Acquire);
            let s2 = self.seq.load(Ordering::Relaxed);
            if s1 == s2 {
                return (s1 / 2, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn layout() {
        assert_eq!(std::mem::size_of::<DeadlineCell>(), 64);
        assert_eq!(std::mem::align_of::<DeadlineCell>(), 64);
        let cells: Vec<DeadlineCell> = (0..4).map(|_| DeadlineCell::default()).collect();
        for c in &cells {
            assert_eq!(c as *const _ as usize % 64, 0);
        }
    }

    #[test]
    fn generations() {
        let c = DeadlineCell::default();
        assert_eq!(c.read(), (0, DISARMED));
        assert_eq!(c.disarm(), 0);
        assert_eq!(c.arm(100), 1);
        assert_eq!(c.arm(200), 2);
        assert_eq!(c.read(), (2, 200));
        assert_eq!(c.disarm(), 3);
        assert_eq!(c.read(), (3, DISARMED));
    }

    #[test]
    fn reader_never_sees_torn_pairs() {
        // The writer always arms generation g with deadline 1000 + g.
        let c = Arc::new(DeadlineCell::default());
        let w = c.clone();
        let writer = std::thread::spawn(move || {
            for _ in 0..200_000 {
                let g = w.read().0 + 1;
                w.arm(1000 + g);
            }
        });
        let mut reads = 0u64;
        while !writer.is_finished() || reads < 1000 {
            let (g, d) = c.read();
            if g > 0 {
                assert_eq!(d, 1000 + g);
            }
            reads += 1;
        }
        writer.join().unwrap();
    }
}
