//! Host-side reference prefetchers. Both are simplified stand-ins: a
//! best-offset style spatial prefetcher and a successor-table temporal one.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use crate::trace::LINE_BYTES;

fn offset_line(line: u64, lines: i64) -> Option<u64> {
    line.checked_add_signed(lines.checked_mul(LINE_BYTES as i64)?)
}

pub const BO_RECENT: usize = 64;
pub const BO_PHASE: usize = 64;
pub const BO_MAX_OFFSET: i64 = 32;

/// Scores every offset in ±1..=32 lines by how often `X - offset` was among
/// the last 64 lines, and switches to the best offset each 64 accesses.
#[derive(Clone, Debug)]
pub struct BestOffset {
    degree: usize,
    recent: VecDeque<u64>,
    recent_set: HashSet<u64>,
    scores: BTreeMap<i64, u64>,
    seen: usize,
    best: Option<i64>,
}

impl BestOffset {
    pub fn new(degree: usize) -> Self {
        BestOffset {
            degree,
            recent: VecDeque::with_capacity(BO_RECENT),
            recent_set: HashSet::new(),
            scores: Self::candidates().map(|o| (o, 0)).collect(),
            seen: 0,
            best: None,
        }
    }

    pub fn candidates() -> impl Iterator<Item = i64> {
        (1..=BO_MAX_OFFSET).flat_map(|o| [o, -o])
    }

    /// Offset in lines currently used for prefetching.
    pub fn best_offset(&self) -> Option<i64> {
        self.best
    }

    pub fn observe(&mut self, line: u64) -> Vec<u64> {
        for (&o, s) in self.scores.iter_mut() {
            if offset_line(line, -o).is_some_and(|base| self.recent_set.contains(&base)) {
                *s += 1;
            }
        }
        self.seen += 1;
        if self.seen.is_multiple_of(BO_PHASE) {
            // highest score; the smallest magnitude, then the positive one, wins ties
            self.best = self
                .scores
                .iter()
                .filter(|(_, &s)| s > 0)
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.abs().cmp(&a.0.abs())).then(a.0.cmp(b.0)))
                .map(|(&o, _)| o);
            self.scores.values_mut().for_each(|s| *s = 0);
        }
        if !self.recent_set.contains(&line) {
            if self.recent.len() == BO_RECENT {
                let old = self.recent.pop_front().unwrap();
                self.recent_set.remove(&old);
            }
            self.recent.push_back(line);
            self.recent_set.insert(line);
        }
        match self.best {
            Some(o) => (1..=self.degree as i64).filter_map(|k| offset_line(line, o * k)).collect(),
            None => Vec::new(),
        }
    }
}

pub const TEMPORAL_ENTRIES: usize = 4096;

/// Last-successor table keyed by line, bounded with LRU replacement.
/// Predictions chain through the table up to `degree` lines.
#[derive(Clone, Debug)]
pub struct TemporalTable {
    degree: usize,
    capacity: usize,
    table: HashMap<u64, (u64, u64)>,
    lru: BTreeMap<u64, u64>,
    stamp: u64,
    prev: Option<u64>,
    lookups: u64,
    hits: u64,
}

impl TemporalTable {
    pub fn new(degree: usize, capacity: usize) -> Self {
        TemporalTable {
            degree,
            capacity: capacity.max(1),
            table: HashMap::new(),
            lru: BTreeMap::new(),
            stamp: 0,
            prev: None,
            lookups: 0,
            hits: 0,
        }
    }

    fn put(&mut self, key: u64, succ: u64) {
        self.stamp += 1;
        if let Some((_, old)) = self.table.insert(key, (succ, self.stamp)) {
            self.lru.remove(&old);
        } else if self.table.len() > self.capacity {
            let (_, victim) = self.lru.pop_first().unwrap();
            self.table.remove(&victim);
        }
        self.lru.insert(self.stamp, key);
    }

    pub fn successor(&self, line: u64) -> Option<u64> {
        self.table.get(&line).map(|e| e.0)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Fraction of observations whose line had a recorded successor.
    pub fn hit_rate(&self) -> f64 {
        if self.lookups == 0 {
            0.0
        } else {
            self.hits as f64 / self.lookups as f64
        }
    }

    pub fn observe(&mut self, line: u64) -> Vec<u64> {
        if let Some(p) = self.prev.replace(line) {
            if p != line {
                self.put(p, line);
            }
        }
        self.lookups += 1;
        let mut out = Vec::new();
        let mut cur = line;
        while out.len() < self.degree {
            match self.successor(cur) {
                Some(s) if s != line && !out.contains(&s) => {
                    out.push(s);
                    cur = s;
                }
                _ => break,
            }
        }
        if !out.is_empty() {
            self.hits += 1;
        }
        out
    }
}
