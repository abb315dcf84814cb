use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Events scheduled for the same cycle run in ascending rank, then in
/// scheduling order.
pub trait Ranked {
    fn rank(&self) -> u8;
}

struct Entry<E> {
    cycle: u64,
    rank: u8,
    seq: u64,
    event: E,
}

impl<E> Entry<E> {
    fn key(&self) -> (u64, u8, u64) {
        (self.cycle, self.rank, self.seq)
    }
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    seq: u64,
    now: u64,
}

impl<E: Ranked> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Ranked> EventQueue<E> {
    pub fn new() -> Self {
        EventQueue { heap: BinaryHeap::new(), seq: 0, now: 0 }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Panics if `cycle` is before the last popped event.
    pub fn push(&mut self, cycle: u64, event: E) {
        assert!(cycle >= self.now, "event scheduled at {cycle}, before now {}", self.now);
        let rank = event.rank();
        self.heap.push(Entry { cycle, rank, seq: self.seq, event });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(u64, E)> {
        let e = self.heap.pop()?;
        self.now = e.cycle;
        Some((e.cycle, e.event))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq)]
    struct Ev(u8, &'static str);

    impl Ranked for Ev {
        fn rank(&self) -> u8 {
            self.0
        }
    }

    #[test]
    fn pops_by_cycle_rank_then_seq() {
        let mut q = EventQueue::new();
        q.push(10, Ev(2, "c"));
        q.push(5, Ev(9, "a"));
        q.push(10, Ev(1, "b"));
        q.push(10, Ev(2, "d"));
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).map(|(c, e)| (c, e.1)).collect();
        assert_eq!(order, vec![(5, "a"), (10, "b"), (10, "c"), (10, "d")]);
    }

    #[test]
    #[should_panic(expected = "before now")]
    fn past_events_rejected() {
        let mut q = EventQueue::new();
        q.push(10, Ev(0, "x"));
        q.pop();
        q.push(9, Ev(0, "y"));
    }
}
