//! Host cache hierarchy: per-core L1 and L2, a shared LLC, and the
//! reflector buffer that sits behind the LLC in the root complex.

mod reflector;
mod set_assoc;

use serde::{Deserialize, Serialize};

pub use reflector::{BufferedLine, ReflectorBuffer, REFLECTOR_BYTES, REFLECTOR_LINES};
pub use set_assoc::{CacheLevelConfig, Evicted, SetAssocCache};

use crate::protocol::{IoNotification, NotificationKind, Payload};
use crate::trace::CoreId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    Llc,
    Reflector,
    Miss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessOutcome {
    pub level_hit: Level,
    pub completion_cycle: u64,
    pub was_prefetched: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostCacheConfig {
    pub l1: CacheLevelConfig,
    pub l2: CacheLevelConfig,
    pub llc: CacheLevelConfig,
    #[serde(default = "default_reflector_lines")]
    pub reflector_lines: usize,
}

fn default_reflector_lines() -> usize {
    REFLECTOR_LINES
}

impl Default for HostCacheConfig {
    fn default() -> Self {
        HostCacheConfig {
            l1: CacheLevelConfig::new(48 * 1024, 2, 5),
            l2: CacheLevelConfig::new(1280 * 1024, 16, 20),
            llc: CacheLevelConfig::new(2 * 1024 * 1024, 16, 40),
            reflector_lines: REFLECTOR_LINES,
        }
    }
}

impl HostCacheConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, c) in [("l1", &self.l1), ("l2", &self.l2), ("llc", &self.llc)] {
            if let Err(e) = c.validate() {
                errs.push(format!("cache.{name}: {e}"));
            }
        }
        if !(self.l1.hit_latency_cycles <= self.l2.hit_latency_cycles
            && self.l2.hit_latency_cycles <= self.llc.hit_latency_cycles)
        {
            errs.push("cache: hit latencies must not decrease from l1 to llc".into());
        }
        if self.reflector_lines == 0 {
            errs.push("cache.reflector_lines: must be at least 1".into());
        }
        errs
    }
}

/// What happened to a pushed prefetch line on arrival.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delivery {
    Inserted { evicted: Option<u64> },
    /// The host holds a dirty copy, so the pushed data is out of date.
    Stale,
    /// The LLC already holds the line.
    Redundant,
}

#[derive(Clone, Debug)]
pub struct HostCaches {
    config: HostCacheConfig,
    l1: Vec<SetAssocCache>,
    l2: Vec<SetAssocCache>,
    llc: SetAssocCache,
    reflector: ReflectorBuffer,
}

impl HostCaches {
    pub fn new(config: HostCacheConfig, cores: usize) -> Result<Self, String> {
        if let Some(e) = config.validate().into_iter().next() {
            return Err(e);
        }
        let l1 = SetAssocCache::new(config.l1)?;
        let l2 = SetAssocCache::new(config.l2)?;
        Ok(HostCaches {
            config,
            l1: vec![l1; cores.max(1)],
            l2: vec![l2; cores.max(1)],
            llc: SetAssocCache::new(config.llc)?,
            reflector: ReflectorBuffer::with_capacity(config.reflector_lines),
        })
    }

    pub fn config(&self) -> &HostCacheConfig {
        &self.config
    }

    pub fn reflector(&self) -> &ReflectorBuffer {
        &self.reflector
    }

    pub fn llc_contains(&self, line: u64) -> bool {
        self.llc.contains(line)
    }

    pub fn is_dirty(&self, line: u64) -> bool {
        self.llc.is_dirty(line) || self.l1.iter().chain(&self.l2).any(|c| c.is_dirty(line))
    }

    fn mark_dirty(&mut self, core: usize, line: u64) {
        self.l1[core].mark_dirty(line);
        self.l2[core].mark_dirty(line);
        self.llc.mark_dirty(line);
    }

    /// A dirty victim hands its dirtiness to another copy this core can
    /// see; with no copy left it must be written back.
    fn retire(&mut self, core: usize, ev: Option<Evicted>, writebacks: &mut Vec<u64>) {
        let Some(ev) = ev else { return };
        if !ev.dirty {
            return;
        }
        let line = ev.line;
        if !(self.l1[core].mark_dirty(line) | self.l2[core].mark_dirty(line) | self.llc.mark_dirty(line)) {
            writebacks.push(line);
        }
    }

    fn fill_l1(&mut self, core: usize, line: u64, dirty: bool, wb: &mut Vec<u64>) {
        let ev = self.l1[core].insert(line, dirty);
        self.retire(core, ev, wb);
    }

    fn fill_l2(&mut self, core: usize, line: u64, dirty: bool, wb: &mut Vec<u64>) {
        let ev = self.l2[core].insert(line, dirty);
        self.retire(core, ev, wb);
    }

    fn fill_llc(&mut self, core: usize, line: u64, dirty: bool, wb: &mut Vec<u64>) {
        self.reflector.take(line);
        let ev = self.llc.insert(line, dirty);
        self.retire(core, ev, wb);
    }

    /// Probes L1, L2 then LLC. On a hit the upper levels are filled at once.
    /// Lines that must be written back are appended to `wb`.
    pub fn lookup(&mut self, core: CoreId, line: u64, write: bool, wb: &mut Vec<u64>) -> Option<Level> {
        let c = core as usize;
        let level = if self.l1[c].touch(line) {
            Level::L1
        } else if self.l2[c].touch(line) {
            self.fill_l1(c, line, write, wb);
            Level::L2
        } else if self.llc.touch(line) {
            self.fill_l2(c, line, write, wb);
            self.fill_l1(c, line, write, wb);
            Level::Llc
        } else {
            return None;
        };
        if write {
            self.mark_dirty(c, line);
        }
        Some(level)
    }

    /// Installs a line returned from memory into every level.
    pub fn fill(&mut self, core: CoreId, line: u64, write: bool, wb: &mut Vec<u64>) {
        let c = core as usize;
        self.fill_llc(c, line, write, wb);
        self.fill_l2(c, line, write, wb);
        self.fill_l1(c, line, write, wb);
    }

    /// Reflector probe after an LLC miss. A hit removes the line from the
    /// buffer and installs it in the hierarchy.
    pub fn take_prefetched(&mut self, core: CoreId, line: u64, write: bool, wb: &mut Vec<u64>) -> Option<BufferedLine> {
        let hit = self.reflector.take(line)?;
        self.fill(core, line, write, wb);
        Some(hit)
    }

    pub fn deliver_prefetch(&mut self, line: u64, data: Payload, cycle: u64) -> Delivery {
        if self.is_dirty(line) {
            return Delivery::Stale;
        }
        if self.llc.contains(line) {
            return Delivery::Redundant;
        }
        Delivery::Inserted { evicted: self.reflector.insert(line, data, cycle) }
    }
}

/// Builds the CXL.io report for a host hit on a CXL-homed line.
pub fn notify_hit(line: u64, pc: u64, cycle: u64) -> IoNotification {
    IoNotification { kind: NotificationKind::CacheHit, addr: line, pc, cpu_cycle: cycle }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn host() -> HostCaches {
        HostCaches::new(HostCacheConfig::default(), 1).unwrap()
    }

    #[test]
    fn second_access_hits_l1() {
        let mut h = host();
        let mut wb = Vec::new();
        assert_eq!(h.lookup(0, 0x1000, false, &mut wb), None);
        h.fill(0, 0x1000, false, &mut wb);
        assert_eq!(h.lookup(0, 0x1000, false, &mut wb), Some(Level::L1));
        assert_eq!(h.config().l1.hit_latency_cycles, 5);
    }

    #[test]
    fn prefetched_line_is_served_from_reflector() {
        let mut h = host();
        let mut wb = Vec::new();
        assert_eq!(h.deliver_prefetch(0x40, [7; 64], 3), Delivery::Inserted { evicted: None });
        assert_eq!(h.lookup(0, 0x40, false, &mut wb), None);
        assert_eq!(h.take_prefetched(0, 0x40, false, &mut wb).unwrap().data, [7; 64]);
        assert!(!h.reflector().contains(0x40));
        assert!(h.llc_contains(0x40));
    }

    #[test]
    fn stale_and_redundant_prefetches() {
        let mut h = host();
        let mut wb = Vec::new();
        h.fill(0, 0x80, true, &mut wb);
        assert_eq!(h.deliver_prefetch(0x80, [0; 64], 0), Delivery::Stale);
        h.fill(0, 0xC0, false, &mut wb);
        assert_eq!(h.deliver_prefetch(0xC0, [0; 64], 0), Delivery::Redundant);
        assert!(h.reflector().is_empty());
    }

    #[test]
    fn llc_fill_evicts_buffer_copy() {
        let mut h = host();
        let mut wb = Vec::new();
        h.deliver_prefetch(0x100, [0; 64], 0);
        h.fill(0, 0x100, false, &mut wb);
        assert!(!h.reflector().contains(0x100));
    }

    #[test]
    fn dirty_line_written_back_once() {
        let cfg = HostCacheConfig {
            l1: CacheLevelConfig::new(128, 2, 1),
            l2: CacheLevelConfig::new(128, 2, 2),
            llc: CacheLevelConfig::new(128, 2, 3),
            reflector_lines: 4,
        };
        let mut h = HostCaches::new(cfg, 1).unwrap();
        let mut wb = Vec::new();
        h.fill(0, 0, true, &mut wb);
        for l in [64, 128, 192, 256] {
            h.fill(0, l, false, &mut wb);
        }
        assert_eq!(wb, vec![0]);
    }

    #[test]
    fn notification_fields() {
        let n = notify_hit(0x40, 0x400000, 100);
        assert_eq!(n.cpu_cycle, 100);
        assert_eq!(n.kind, NotificationKind::CacheHit);
    }
}
