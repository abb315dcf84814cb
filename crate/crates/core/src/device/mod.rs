//! CXL-SSD endpoint: an internal DRAM cache in front of backend media and a
//! single controller that serves demand reads before prefetch reads.

mod media;

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use media::{MediaKind, MediaProfile};

use crate::cache::{CacheLevelConfig, SetAssocCache};
use crate::protocol::{line_payload, Message, Opcode, Payload};
use crate::trace::{line_of, LINE_BYTES};
use crate::units::{Clock, Latency};

/// Internal DRAM size of the modelled product.
pub const FULL_INTERNAL_CACHE_BYTES: u64 = 1536 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub internal_cache_bytes: u64,
    pub internal_ways: u32,
    /// tRP + tRCD + tRAS of the internal DRAM.
    pub internal_hit_ns: Latency,
    /// Controller occupancy per request.
    pub service_ns: Latency,
    pub capacity_bytes: u64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            internal_cache_bytes: 4 * 1024 * 1024,
            internal_ways: 16,
            internal_hit_ns: Latency::from_ns(37.2),
            service_ns: Latency::from_ns(2.0),
            capacity_bytes: 1 << 40,
        }
    }
}

impl DeviceConfig {
    /// How far the internal cache is scaled down from the real device.
    pub fn internal_cache_scale(&self) -> f64 {
        self.internal_cache_bytes as f64 / FULL_INTERNAL_CACHE_BYTES as f64
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(e) = CacheLevelConfig::new(self.internal_cache_bytes, self.internal_ways, 0).validate() {
            errs.push(format!("device.internal_cache: {e}"));
        }
        if self.internal_hit_ns.is_zero() {
            errs.push("device.internal_hit_ns: must be positive".into());
        }
        if self.capacity_bytes < LINE_BYTES {
            errs.push("device.capacity_bytes: must hold at least one line".into());
        }
        errs
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DeviceError {
    #[error("address {addr:#x} beyond device capacity {capacity:#x}")]
    OutOfRange { addr: u64, capacity: u64 },
    #[error("device cannot ingest {0:?}")]
    Unexpected(Opcode),
    #[error(transparent)]
    Protocol(#[from] crate::protocol::ProtocolError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadKind {
    Demand { tag: u32 },
    Prefetch,
}

/// A read waiting for, or holding, the controller. `line` is the
/// device-local line address; `host_line` is what goes back on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReadRequest {
    pub kind: ReadKind,
    pub line: u64,
    pub host_line: u64,
    pub arrival: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReadDone {
    pub request: ReadRequest,
    pub completion: u64,
    pub internal_hit: bool,
}

/// Result of handing a host message to the device.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ingest {
    /// A read was queued; `pc` is set for PC-carrying reads.
    Queued { pc: Option<u64>, dispatch_at: Option<u64> },
    /// A write was absorbed; the NDR completion leaves at `ndr_cycle`.
    Written { ndr_cycle: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrefetchIssue {
    Queued { dispatch_at: Option<u64> },
    Suppressed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceStats {
    pub demand_reads: u64,
    pub prefetch_reads: u64,
    pub internal_hits: u64,
    pub internal_misses: u64,
    pub writes: u64,
    pub media_writebacks: u64,
    pub suppressed_prefetches: u64,
}

#[derive(Clone, Debug)]
pub struct Device {
    config: DeviceConfig,
    media: MediaProfile,
    hit_cycles: u64,
    media_read_cycles: u64,
    service_cycles: u64,
    cache: SetAssocCache,
    /// Lines whose media fill is still in progress, with their ready cycle.
    filling: HashMap<u64, u64>,
    demand_q: VecDeque<ReadRequest>,
    prefetch_q: VecDeque<ReadRequest>,
    busy_until: u64,
    dispatch_pending: bool,
    prefetch_inflight: HashSet<u64>,
    stats: DeviceStats,
}

impl Device {
    pub fn new(config: DeviceConfig, media: MediaProfile, clock: Clock) -> Result<Self, String> {
        if let Some(e) = config.validate().into_iter().next() {
            return Err(e);
        }
        media.validate()?;
        Ok(Device {
            config,
            media,
            hit_cycles: clock.cycles(config.internal_hit_ns),
            media_read_cycles: clock.cycles(media.read_latency_ns),
            service_cycles: clock.cycles(config.service_ns),
            cache: SetAssocCache::new(CacheLevelConfig::new(config.internal_cache_bytes, config.internal_ways, 0))?,
            filling: HashMap::new(),
            demand_q: VecDeque::new(),
            prefetch_q: VecDeque::new(),
            busy_until: 0,
            dispatch_pending: false,
            prefetch_inflight: HashSet::new(),
            stats: DeviceStats::default(),
        })
    }

    pub fn media(&self) -> &MediaProfile {
        &self.media
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn stats(&self) -> DeviceStats {
        self.stats
    }

    /// Latency published through DSLBIS: an internal-cache hit.
    pub fn declared_latency(&self) -> Latency {
        self.config.internal_hit_ns
    }

    pub fn hit_cycles(&self) -> u64 {
        self.hit_cycles
    }

    pub fn media_read_cycles(&self) -> u64 {
        self.media_read_cycles
    }

    fn check(&self, addr: u64) -> Result<(), DeviceError> {
        if addr >= self.config.capacity_bytes {
            return Err(DeviceError::OutOfRange { addr, capacity: self.config.capacity_bytes });
        }
        Ok(())
    }

    /// Internal read starting at `cycle`: a hit costs the internal DRAM
    /// latency, a miss adds the media read and fills the line.
    pub fn serve_read(&mut self, addr: u64, cycle: u64) -> Result<(u64, Payload, bool), DeviceError> {
        self.check(addr)?;
        let line = line_of(addr);
        let data = line_payload(line);
        if self.cache.touch(line) {
            self.stats.internal_hits += 1;
            let ready = self.filling.get(&line).copied().unwrap_or(0);
            return Ok(((cycle + self.hit_cycles).max(ready), data, true));
        }
        self.stats.internal_misses += 1;
        let done = cycle + self.hit_cycles + self.media_read_cycles;
        if let Some(ev) = self.cache.insert(line, false) {
            self.filling.remove(&ev.line);
            if ev.dirty {
                self.stats.media_writebacks += 1;
            }
        }
        self.filling.insert(line, done);
        if self.filling.len() > 4 * self.config.internal_ways as usize * 64 {
            self.filling.retain(|_, &mut r| r > cycle);
        }
        Ok((done, data, false))
    }

    /// Absorbs a write into the internal cache; returns the NDR cycle.
    pub fn serve_write(&mut self, addr: u64, cycle: u64) -> Result<u64, DeviceError> {
        self.check(addr)?;
        self.stats.writes += 1;
        if let Some(ev) = self.cache.insert(line_of(addr), true) {
            self.filling.remove(&ev.line);
            if ev.dirty {
                self.stats.media_writebacks += 1;
            }
        }
        Ok(cycle + self.hit_cycles)
    }

    fn enqueue(&mut self, req: ReadRequest, now: u64) -> Option<u64> {
        match req.kind {
            ReadKind::Demand { .. } => self.demand_q.push_back(req),
            ReadKind::Prefetch => self.prefetch_q.push_back(req),
        }
        if self.dispatch_pending {
            return None;
        }
        self.dispatch_pending = true;
        Some(now.max(self.busy_until))
    }

    /// `local` is the device-local address of `msg.addr`. Returns when the
    /// engine must next call [`Device::dispatch`], if it is not already due.
    pub fn ingest_demand(&mut self, msg: &Message, local: u64, now: u64) -> Result<Ingest, DeviceError> {
        msg.validate()?;
        match msg.opcode {
            Opcode::MemRd | Opcode::MemRdPC => {
                self.check(local)?;
                self.stats.demand_reads += 1;
                let req = ReadRequest {
                    kind: ReadKind::Demand { tag: msg.tag },
                    line: line_of(local),
                    host_line: msg.addr,
                    arrival: now,
                };
                let dispatch_at = self.enqueue(req, now);
                Ok(Ingest::Queued { pc: msg.pc, dispatch_at })
            }
            Opcode::MemWr => Ok(Ingest::Written { ndr_cycle: self.serve_write(local, now)? }),
            other => Err(DeviceError::Unexpected(other)),
        }
    }

    /// Queues an internal read whose data will be pushed to the host. A
    /// second request for a line already being prefetched is dropped.
    pub fn issue_prefetch(&mut self, host_line: u64, local: u64, now: u64) -> Result<PrefetchIssue, DeviceError> {
        self.check(local)?;
        let line = line_of(local);
        if !self.prefetch_inflight.insert(line) {
            self.stats.suppressed_prefetches += 1;
            return Ok(PrefetchIssue::Suppressed);
        }
        self.stats.prefetch_reads += 1;
        let req = ReadRequest { kind: ReadKind::Prefetch, line, host_line, arrival: now };
        Ok(PrefetchIssue::Queued { dispatch_at: self.enqueue(req, now) })
    }

    pub fn prefetch_in_flight(&self, local_line: u64) -> bool {
        self.prefetch_inflight.contains(&local_line)
    }

    /// Starts the highest-priority queued read. Returns it with its
    /// completion cycle and, if more work is queued, the next dispatch cycle.
    pub fn dispatch(&mut self, now: u64) -> (Option<ReadDone>, Option<u64>) {
        let Some(req) = self.demand_q.pop_front().or_else(|| self.prefetch_q.pop_front()) else {
            self.dispatch_pending = false;
            return (None, None);
        };
        let start = now.max(self.busy_until);
        self.busy_until = start + self.service_cycles;
        let (completion, _, internal_hit) = self.serve_read(req.line, start).expect("checked on ingest");
        let next = if self.demand_q.is_empty() && self.prefetch_q.is_empty() {
            self.dispatch_pending = false;
            None
        } else {
            Some(self.busy_until)
        };
        (Some(ReadDone { request: req, completion, internal_hit }), next)
    }

    /// Called once a prefetch read has finished and its data has left.
    pub fn prefetch_sent(&mut self, local_line: u64) {
        self.prefetch_inflight.remove(&local_line);
    }

    pub fn queued(&self) -> (usize, usize) {
        (self.demand_q.len(), self.prefetch_q.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev(media: MediaProfile) -> Device {
        Device::new(DeviceConfig::default(), media, Clock::default()).unwrap()
    }

    #[test]
    fn read_latencies() {
        let mut d = dev(MediaProfile::znand());
        let hit = Clock::default().cycles(Latency::from_ns(37.2));
        let media = Clock::default().cycles(Latency::from_ns(3000.0));
        let (t, _, h) = d.serve_read(0x1000, 100).unwrap();
        assert!(!h);
        assert_eq!(t, 100 + hit + media);
        let (t, _, h) = d.serve_read(0x1000, 100_000).unwrap();
        assert!(h);
        assert_eq!(t, 100_000 + hit);
        assert!(matches!(d.serve_read(1 << 41, 0), Err(DeviceError::OutOfRange { .. })));
    }

    #[test]
    fn hit_on_filling_line_waits_for_media() {
        let mut d = dev(MediaProfile::znand());
        let (first, _, _) = d.serve_read(0x40, 0).unwrap();
        let (second, _, hit) = d.serve_read(0x40, 10).unwrap();
        assert!(hit);
        assert_eq!(second, first);
    }

    #[test]
    fn demand_beats_prefetch() {
        let mut d = dev(MediaProfile::dram());
        let at = d.issue_prefetch(0x0, 0x0, 0).unwrap();
        assert_eq!(at, PrefetchIssue::Queued { dispatch_at: Some(0) });
        let m = Message::mem_rd(0x40, 1);
        assert!(matches!(d.ingest_demand(&m, 0x40, 0).unwrap(), Ingest::Queued { pc: None, dispatch_at: None }));
        let (done, next) = d.dispatch(0);
        assert_eq!(done.unwrap().request.kind, ReadKind::Demand { tag: 1 });
        let (done, next2) = d.dispatch(next.unwrap());
        assert_eq!(done.unwrap().request.kind, ReadKind::Prefetch);
        assert_eq!(next2, None);
    }

    #[test]
    fn duplicate_prefetch_suppressed() {
        let mut d = dev(MediaProfile::dram());
        assert_eq!(d.issue_prefetch(0x80, 0x80, 0).unwrap(), PrefetchIssue::Queued { dispatch_at: Some(0) });
        assert_eq!(d.issue_prefetch(0x80, 0x80, 1).unwrap(), PrefetchIssue::Suppressed);
        assert_eq!(d.stats().suppressed_prefetches, 1);
        d.dispatch(0);
        d.prefetch_sent(0x80);
        assert!(matches!(d.issue_prefetch(0x80, 0x80, 5).unwrap(), PrefetchIssue::Queued { .. }));
    }

    #[test]
    fn writes_complete_at_hit_latency() {
        let mut d = dev(MediaProfile::znand());
        let m = Message::mem_wr(0x40, [0; 64], 3);
        assert_eq!(d.ingest_demand(&m, 0x40, 10).unwrap(), Ingest::Written { ndr_cycle: 10 + d.hit_cycles() });
        let (_, _, hit) = d.serve_read(0x40, 20).unwrap();
        assert!(hit);
        assert_eq!(d.ingest_demand(&Message::cmp(0, 0), 0, 0), Err(DeviceError::Unexpected(Opcode::Cmp)));
    }

    #[test]
    fn pc_is_forwarded() {
        let mut d = dev(MediaProfile::dram());
        let r = d.ingest_demand(&Message::mem_rd_pc(0x40, 0x400123, 1), 0x40, 0).unwrap();
        assert_eq!(r, Ingest::Queued { pc: Some(0x400123), dispatch_at: Some(0) });
    }
}
