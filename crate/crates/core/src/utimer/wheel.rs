use std::cmp::Reverse;
use std::collections::BinaryHeap;

/// Single-level hashed timing wheel with an overflow heap for deadlines
/// beyond one revolution.
///
/// Deadlines are absolute nanoseconds. Slot `i` holds entries whose tick
/// (`deadline / slot_ns`) is congruent to `i` and lies within the current
/// revolution, so each slot only ever holds a single tick's worth of entries.
#[derive(Debug)]
pub struct TimingWheel<T> {
    slot_ns: u64,
    slots: Vec<Vec<(u64, T)>>,
    /// Tick of the slot under the cursor; every stored entry has tick >= cursor.
    cursor: u64,
    overflow: BinaryHeap<Reverse<OverflowEntry<T>>>,
    next_seq: u64,
    len: usize,
}

#[derive(Debug)]
struct OverflowEntry<T> {
    deadline: u64,
    seq: u64,
    item: T,
}

impl<T> PartialEq for OverflowEntry<T> {
    fn eq(&self, o: &Self) -> bool {
        (self.deadline, self.seq) == (o.deadline, o.seq)
    }
}
impl<T> Eq for OverflowEntry<T> {}
impl<T> PartialOrd for OverflowEntry<T> {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl<T> Ord for OverflowEntry<T> {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.deadline, self.seq).cmp(&(o.deadline, o.seq))
    }
}

impl<T> TimingWheel<T> {
    pub fn new(slot_ns: u64, slots: usize) -> Self {
        assert!(slot_ns > 0 && slots >= 2, "invalid wheel geometry");
        TimingWheel {
            slot_ns,
            slots: (0..slots).map(|_| Vec::new()).collect(),
            cursor: 0,
            overflow: BinaryHeap::new(),
            next_seq: 0,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn span(&self) -> u64 {
        self.slots.len() as u64
    }

    pub fn insert(&mut self, deadline: u64, item: T) {
        let tick = (deadline / self.slot_ns).max(self.cursor);
        self.len += 1;
        if tick - self.cursor < self.span() {
            let idx = (tick % self.span()) as usize;
            self.slots[idx].push((deadline, item));
        } else {
            let seq = self.next_seq;
            self.next_seq += 1;
            self.overflow.push(Reverse(OverflowEntry {
                deadline,
                seq,
                item,
            }));
        }
    }

    /// Moves overflow entries that now fall inside the wheel's revolution.
    fn cascade(&mut self) {
        while let Some(Reverse(top)) = self.overflow.peek() {
            let tick = top.deadline / self.slot_ns;
            if tick.saturating_sub(self.cursor) >= self.span() {
                break;
            }
            let Reverse(e) = self.overflow.pop().expect("peeked");
            let tick = tick.max(self.cursor);
            let idx = (tick % self.span()) as usize;
            self.slots[idx].push((e.deadline, e.item));
        }
    }

    /// Earliest stored deadline.
    pub fn next_deadline(&self) -> Option<u64> {
        if self.len == 0 {
            return None;
        }
        let n = self.span();
        let in_wheel = (0..n).find_map(|off| {
            let idx = ((self.cursor + off) % n) as usize;
            self.slots[idx].iter().map(|(d, _)| *d).min()
        });
        let in_overflow = self.overflow.peek().map(|Reverse(e)| e.deadline);
        match (in_wheel, in_overflow) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Drops entries rejected by `live` until the earliest remaining entry is
    /// accepted, and returns its deadline.
    pub fn next_live(&mut self, mut live: impl FnMut(u64, &T) -> bool) -> Option<u64> {
        while let Some(Reverse(e)) = self.overflow.peek() {
            if live(e.deadline, &e.item) {
                break;
            }
            self.overflow.pop();
            self.len -= 1;
        }
        let n = self.span();
        let mut in_wheel = None;
        for off in 0..n {
            let idx = ((self.cursor + off) % n) as usize;
            let slot = &mut self.slots[idx];
            let before = slot.len();
            slot.retain(|(d, t)| live(*d, t));
            self.len -= before - slot.len();
            if let Some(m) = slot.iter().map(|(d, _)| *d).min() {
                in_wheel = Some(m);
                break;
            }
        }
        let in_overflow = self.overflow.peek().map(|Reverse(e)| e.deadline);
        match (in_wheel, in_overflow) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Removes every entry with `deadline <= now`, appending them to `out`
    /// sorted by deadline (stable in insertion order within a slot).
    pub fn advance(&mut self, now: u64, out: &mut Vec<(u64, T)>) {
        let start = out.len();
        let target = now / self.slot_ns;
        loop {
            self.cascade();
            let n = self.span();
            let steps = (target.saturating_sub(self.cursor)).min(n - 1);
            for off in 0..=steps {
                let idx = ((self.cursor + off) % n) as usize;
                let slot = &mut self.slots[idx];
                let mut i = 0;
                while i < slot.len() {
                    if slot[i].0 <= now {
                        out.push(slot.remove(i));
                    } else {
                        i += 1;
                    }
                }
            }
            if target <= self.cursor + steps {
                self.cursor = self.cursor.max(target);
                break;
            }
            // A full revolution was swept, so the wheel itself is empty; skip
            // ahead to the earliest overflow tick.
            let next = self
                .overflow
                .peek()
                .map(|Reverse(e)| e.deadline / self.slot_ns)
                .unwrap_or(target);
            self.cursor = next.clamp(self.cursor + 1, target);
        }
        self.cascade();
        self.len -= out.len() - start;
        out[start..].sort_by_key(|(d, _)| *d);
    }
}
