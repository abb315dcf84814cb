use std::collections::VecDeque;

pub const DEFAULT_WINDOW: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowEntry {
    pub pc: u64,
    pub line: u64,
    pub arrival_cycle: u64,
    pub is_read: bool,
}

/// Most recent accesses seen by the device, oldest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlidingWindow {
    capacity: usize,
    entries: VecDeque<WindowEntry>,
}

impl Default for SlidingWindow {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW)
    }
}

impl SlidingWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        SlidingWindow { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn from_entries(capacity: usize, entries: impl IntoIterator<Item = WindowEntry>) -> Self {
        let mut w = Self::new(capacity);
        for e in entries {
            w.push(e);
        }
        w
    }

    pub fn push(&mut self, e: WindowEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &WindowEntry> + ExactSizeIterator {
        self.entries.iter()
    }

    pub fn last(&self) -> Option<&WindowEntry> {
        self.entries.back()
    }

    /// A single pc touching a single line carries no pattern to extrapolate.
    pub fn is_degenerate(&self) -> bool {
        let Some(first) = self.entries.front() else { return true };
        self.entries.iter().all(|e| e.pc == first.pc && e.line == first.line)
    }
}
