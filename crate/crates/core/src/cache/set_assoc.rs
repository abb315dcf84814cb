use serde::{Deserialize, Serialize};

use crate::trace::LINE_BYTES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheLevelConfig {
    pub size_bytes: u64,
    pub ways: u32,
    /// Cycles from issue until a hit in this level completes.
    pub hit_latency_cycles: u64,
}

impl CacheLevelConfig {
    pub fn new(size_bytes: u64, ways: u32, hit_latency_cycles: u64) -> Self {
        CacheLevelConfig { size_bytes, ways, hit_latency_cycles }
    }

    pub fn sets(&self) -> u64 {
        self.size_bytes / (self.ways as u64 * LINE_BYTES)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.ways == 0 {
            return Err("ways must be at least 1".into());
        }
        let way_bytes = self.ways as u64 * LINE_BYTES;
        if self.size_bytes == 0 || !self.size_bytes.is_multiple_of(way_bytes) {
            return Err(format!("size {} is not a multiple of ways x 64 B", self.size_bytes));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Evicted {
    pub line: u64,
    pub dirty: bool,
}

#[derive(Clone, Copy, Debug)]
struct Way {
    line: u64,
    dirty: bool,
    stamp: u64,
}

/// Set-associative cache of 64-byte lines with true LRU per set.
#[derive(Clone, Debug)]
pub struct SetAssocCache {
    config: CacheLevelConfig,
    set_count: u64,
    sets: Vec<Vec<Way>>,
    clock: u64,
}

impl SetAssocCache {
    pub fn new(config: CacheLevelConfig) -> Result<Self, String> {
        config.validate()?;
        let n = config.sets() as usize;
        Ok(SetAssocCache {
            config,
            set_count: n as u64,
            sets: vec![Vec::with_capacity(config.ways as usize); n],
            clock: 0,
        })
    }

    pub fn config(&self) -> &CacheLevelConfig {
        &self.config
    }

    fn set_of(&self, line: u64) -> usize {
        // set counts need not be powers of two
        ((line / LINE_BYTES) % self.set_count) as usize
    }

    fn find(&self, line: u64) -> Option<(usize, usize)> {
        let s = self.set_of(line);
        self.sets[s].iter().position(|w| w.line == line).map(|i| (s, i))
    }

    pub fn contains(&self, line: u64) -> bool {
        self.find(line).is_some()
    }

    pub fn is_dirty(&self, line: u64) -> bool {
        self.find(line).is_some_and(|(s, i)| self.sets[s][i].dirty)
    }

    /// Hit test that refreshes recency on a hit.
    pub fn touch(&mut self, line: u64) -> bool {
        match self.find(line) {
            Some((s, i)) => {
                self.clock += 1;
                self.sets[s][i].stamp = self.clock;
                true
            }
            None => false,
        }
    }

    pub fn mark_dirty(&mut self, line: u64) -> bool {
        match self.find(line) {
            Some((s, i)) => {
                self.sets[s][i].dirty = true;
                true
            }
            None => false,
        }
    }

    /// Inserts as most recently used. A present line is only refreshed (and
    /// made dirty if requested).
    pub fn insert(&mut self, line: u64, dirty: bool) -> Option<Evicted> {
        self.clock += 1;
        let stamp = self.clock;
        if let Some((s, i)) = self.find(line) {
            let w = &mut self.sets[s][i];
            w.stamp = stamp;
            w.dirty |= dirty;
            return None;
        }
        let s = self.set_of(line);
        let set = &mut self.sets[s];
        let way = Way { line, dirty, stamp };
        if set.len() < self.config.ways as usize {
            set.push(way);
            return None;
        }
        let victim = set.iter().enumerate().min_by_key(|(_, w)| w.stamp).map(|(i, _)| i).expect("full set");
        let old = std::mem::replace(&mut set[victim], way);
        Some(Evicted { line: old.line, dirty: old.dirty })
    }

    pub fn remove(&mut self, line: u64) -> Option<Evicted> {
        let (s, i) = self.find(line)?;
        let w = self.sets[s].swap_remove(i);
        Some(Evicted { line: w.line, dirty: w.dirty })
    }

    pub fn occupancy(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}
