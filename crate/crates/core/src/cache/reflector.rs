use std::collections::{HashMap, VecDeque};

use crate::protocol::Payload;
use crate::trace::LINE_BYTES;

pub const REFLECTOR_BYTES: usize = 16 * 1024;
pub const REFLECTOR_LINES: usize = REFLECTOR_BYTES / LINE_BYTES as usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferedLine {
    pub data: Payload,
    pub inserted_cycle: u64,
}

/// Root-complex side FIFO of pushed prefetch lines.
#[derive(Clone, Debug)]
pub struct ReflectorBuffer {
    capacity: usize,
    order: VecDeque<u64>,
    entries: HashMap<u64, BufferedLine>,
    peak: usize,
}

impl Default for ReflectorBuffer {
    fn default() -> Self {
        Self::with_capacity(REFLECTOR_LINES)
    }
}

impl ReflectorBuffer {
    pub fn with_capacity(lines: usize) -> Self {
        assert!(lines > 0, "reflector buffer needs at least one line");
        ReflectorBuffer { capacity: lines, order: VecDeque::with_capacity(lines), entries: HashMap::new(), peak: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Highest occupancy ever observed.
    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn contains(&self, line: u64) -> bool {
        self.entries.contains_key(&line)
    }

    /// Inserts at the tail. Returns the line pushed out of the head, if any.
    /// Re-inserting a present line only refreshes its data.
    pub fn insert(&mut self, line: u64, data: Payload, cycle: u64) -> Option<u64> {
        if let Some(e) = self.entries.get_mut(&line) {
            e.data = data;
            return None;
        }
        let mut evicted = None;
        if self.entries.len() == self.capacity {
            while let Some(old) = self.order.pop_front() {
                if self.entries.remove(&old).is_some() {
                    evicted = Some(old);
                    break;
                }
            }
        }
        self.order.push_back(line);
        self.entries.insert(line, BufferedLine { data, inserted_cycle: cycle });
        self.peak = self.peak.max(self.entries.len());
        evicted
    }

    pub fn take(&mut self, line: u64) -> Option<BufferedLine> {
        let e = self.entries.remove(&line)?;
        // Stale ids are skipped lazily on eviction; compact when they pile up.
        if self.order.len() > 2 * self.capacity {
            let entries = &self.entries;
            self.order.retain(|l| entries.contains_key(l));
        }
        Some(e)
    }
}
