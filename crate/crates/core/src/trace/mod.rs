//! Memory-reference traces: the record type, synthetic generators, the
//! on-disk formats and a few statistics used to characterise workloads.

mod gen;
mod io;
mod stats;
mod workloads;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gen::{gen_apex, gen_graph_walk, gen_strided, GraphWalkParams, LocalityParams, StridedParams};
pub use io::{load_csv, load_trace, read_trace, save_csv, save_trace, write_trace, FORMAT_VERSION, MAGIC};
pub use stats::{footprint_lines, reuse_distances, top_share, TraceSummary};
pub use workloads::{bundled_workloads, BundledWorkload};

pub const LINE_BYTES: u64 = 64;

#[inline]
pub fn line_of(addr: u64) -> u64 {
    addr & !(LINE_BYTES - 1)
}

/// Issuing core of a record.
pub type CoreId = u8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Read,
    Write,
}

/// One memory reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceRecord {
    pub pc: u64,
    pub addr: u64,
    pub op: Op,
    /// Issue time in CPU cycles, relative to the start of the trace.
    pub cpu_cycle: u64,
}

impl TraceRecord {
    pub fn read(pc: u64, addr: u64, cpu_cycle: u64) -> Self {
        TraceRecord { pc, addr, op: Op::Read, cpu_cycle }
    }

    pub fn line(&self) -> u64 {
        line_of(self.addr)
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },
    #[error("address overflow at record {index}")]
    AddressOverflow { index: u64 },
    #[error("cpu_cycle decreases at record {index}")]
    NonMonotonic { index: usize },
    #[error("duplicate core id {0}")]
    DuplicateCore(CoreId),
    #[error("{traces} traces but {cores} core ids")]
    CoreCountMismatch { traces: usize, cores: usize },
    #[error("malformed trace header: {0}")]
    MalformedHeader(String),
    #[error("unsupported trace format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("trace truncated inside record {index}")]
    Truncated { index: u64 },
    #[error("record {index}: invalid op byte {value}")]
    InvalidOp { index: u64, value: u8 },
    #[error("record {index}: reserved field must be zero")]
    ReservedNonZero { index: u64 },
    #[error("{0} unexpected bytes after the last record")]
    TrailingData(usize),
    #[error("csv line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An immutable sequence of records, each tagged with its issuing core.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    records: Vec<TraceRecord>,
    cores: Vec<CoreId>,
}

impl Trace {
    /// Single-core trace. Fails if issue cycles go backwards.
    pub fn new(records: Vec<TraceRecord>) -> Result<Self, TraceError> {
        let cores = vec![0; records.len()];
        Self::with_cores(records, cores)
    }

    pub fn with_cores(records: Vec<TraceRecord>, cores: Vec<CoreId>) -> Result<Self, TraceError> {
        if records.len() != cores.len() {
            return Err(TraceError::CoreCountMismatch { traces: records.len(), cores: cores.len() });
        }
        if let Some(i) = records.windows(2).position(|w| w[1].cpu_cycle < w[0].cpu_cycle) {
            return Err(TraceError::NonMonotonic { index: i + 1 });
        }
        Ok(Trace { records, cores })
    }

    pub fn empty() -> Self {
        Trace::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn cores(&self) -> &[CoreId] {
        &self.cores
    }

    pub fn iter(&self) -> impl Iterator<Item = (CoreId, &TraceRecord)> {
        self.cores.iter().copied().zip(self.records.iter())
    }

    /// Distinct core ids in ascending order.
    pub fn core_ids(&self) -> Vec<CoreId> {
        let mut seen = [false; 256];
        for &c in &self.cores {
            seen[c as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }

    /// Re-stamps issue cycles so that consecutive records are `gap` cycles
    /// apart, starting at `start`.
    pub fn paced(&self, start: u64, gap: u64) -> Trace {
        self.paced_cycle(start, &[gap])
    }

    /// Like [`Trace::paced`] but the gaps repeat through `gaps` in order.
    pub fn paced_cycle(&self, start: u64, gaps: &[u64]) -> Trace {
        assert!(!gaps.is_empty(), "pacing needs at least one gap");
        let mut t = start;
        let records = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if i > 0 {
                    t += gaps[(i - 1) % gaps.len()];
                }
                TraceRecord { cpu_cycle: t, ..*r }
            })
            .collect();
        Trace { records, cores: self.cores.clone() }
    }

    /// Copy with every address shifted by `offset` bytes.
    pub fn offset_addresses(&self, offset: u64) -> Result<Trace, TraceError> {
        let records = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.addr
                    .checked_add(offset)
                    .map(|addr| TraceRecord { addr, ..*r })
                    .ok_or(TraceError::AddressOverflow { index: i as u64 })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Trace { records, cores: self.cores.clone() })
    }

    pub fn truncated(&self, n: usize) -> Trace {
        let n = n.min(self.len());
        Trace { records: self.records[..n].to_vec(), cores: self.cores[..n].to_vec() }
    }
}

/// Merges per-core traces by issue cycle. Ties go to the lower core id, and
/// records from one input keep their relative order.
pub fn interleave(traces: &[Trace], core_ids: &[CoreId]) -> Result<Trace, TraceError> {
    if traces.len() != core_ids.len() {
        return Err(TraceError::CoreCountMismatch { traces: traces.len(), cores: core_ids.len() });
    }
    let mut seen = [false; 256];
    for &c in core_ids {
        if std::mem::replace(&mut seen[c as usize], true) {
            return Err(TraceError::DuplicateCore(c));
        }
    }
    let total: usize = traces.iter().map(Trace::len).sum();
    let mut cursors = vec![0usize; traces.len()];
    let mut records = Vec::with_capacity(total);
    let mut cores = Vec::with_capacity(total);
    for _ in 0..total {
        let mut best: Option<(u64, CoreId, usize)> = None;
        for (k, t) in traces.iter().enumerate() {
            if let Some(r) = t.records.get(cursors[k]) {
                let key = (r.cpu_cycle, core_ids[k], k);
                if best.is_none_or(|b| key < b) {
                    best = Some(key);
                }
            }
        }
        let (_, core, k) = best.expect("counted records remain");
        records.push(traces[k].records[cursors[k]]);
        cores.push(core);
        cursors[k] += 1;
    }
    Ok(Trace { records, cores })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(cycles: &[u64], base: u64) -> Trace {
        Trace::new(cycles.iter().enumerate().map(|(i, &c)| TraceRecord::read(1, base + i as u64 * 64, c)).collect())
            .unwrap()
    }

    #[test]
    fn interleave_identity() {
        let a = t(&[0, 5, 9], 0);
        assert_eq!(interleave(std::slice::from_ref(&a), &[0]).unwrap(), a);
    }

    #[test]
    fn interleave_disjoint_ranges_concatenates() {
        let a = t(&[0, 1, 2], 0);
        let b = t(&[10, 11], 4096);
        let m = interleave(&[b.clone(), a.clone()], &[1, 0]).unwrap();
        let addrs: Vec<u64> = m.records().iter().map(|r| r.addr).collect();
        assert_eq!(addrs, vec![0, 64, 128, 4096, 4160]);
        assert_eq!(m.cores(), &[0, 0, 0, 1, 1]);
    }

    #[test]
    fn interleave_ties_alternate_by_core() {
        let a = t(&[0, 0, 0], 0);
        let b = t(&[0, 0, 0], 4096);
        let m = interleave(&[b, a], &[3, 2]).unwrap();
        assert_eq!(m.cores(), &[2, 2, 2, 3, 3, 3]);
        let a = t(&[1, 2, 3], 0);
        let b = t(&[1, 2, 3], 4096);
        let m = interleave(&[a, b], &[0, 1]).unwrap();
        assert_eq!(m.cores(), &[0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn interleave_rejects_duplicate_cores() {
        let a = t(&[0], 0);
        assert!(matches!(interleave(&[a.clone(), a], &[1, 1]), Err(TraceError::DuplicateCore(1))));
    }

    #[test]
    fn non_monotonic_rejected() {
        let recs = vec![TraceRecord::read(0, 0, 5), TraceRecord::read(0, 0, 4)];
        assert!(matches!(Trace::new(recs), Err(TraceError::NonMonotonic { index: 1 })));
    }

    #[test]
    fn pacing_cycles_through_gaps() {
        let tr = t(&[0, 0, 0, 0, 0], 0).paced_cycle(10, &[1, 2]);
        let c: Vec<u64> = tr.records().iter().map(|r| r.cpu_cycle).collect();
        assert_eq!(c, vec![10, 11, 13, 14, 16]);
    }
}
