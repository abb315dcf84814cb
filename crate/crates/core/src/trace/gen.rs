//! Synthetic workload generators. All of them are pure functions of their
//! parameters, so parallel callers can share nothing and still agree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Op, Trace, TraceError, TraceRecord};

/// Cycles between consecutive records when a generator is not told otherwise.
pub const DEFAULT_ISSUE_GAP: u64 = 4;

const APEX_PC_BASE: u64 = 0x40_0000;
const ELEMENT_BYTES: u64 = 8;

/// Knobs of the locality generator: `alpha` controls temporal reuse (1 is
/// uniform random), `vector_len` the number of consecutive 8-byte elements
/// touched per visit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityParams {
    pub alpha: f64,
    pub vector_len: u64,
    pub footprint_bytes: u64,
    pub record_count: u64,
    pub seed: u64,
    #[serde(default = "default_gap")]
    pub issue_gap: u64,
    #[serde(default)]
    pub write_fraction: f64,
    #[serde(default)]
    pub base: u64,
}

fn default_gap() -> u64 {
    DEFAULT_ISSUE_GAP
}

impl LocalityParams {
    pub fn new(alpha: f64, vector_len: u64, footprint_bytes: u64, record_count: u64, seed: u64) -> Self {
        LocalityParams {
            alpha,
            vector_len,
            footprint_bytes,
            record_count,
            seed,
            issue_gap: DEFAULT_ISSUE_GAP,
            write_fraction: 0.0,
            base: 0,
        }
    }

    fn validate(&self) -> Result<(), TraceError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(TraceError::InvalidParam { field: "alpha", reason: format!("must lie in (0, 1], got {}", self.alpha) });
        }
        if self.vector_len == 0 {
            return Err(TraceError::InvalidParam { field: "L", reason: "must be at least 1".into() });
        }
        let region = self.vector_len.checked_mul(ELEMENT_BYTES).ok_or(TraceError::InvalidParam {
            field: "L",
            reason: "vector length overflows the address space".into(),
        })?;
        if self.footprint_bytes < region {
            return Err(TraceError::InvalidParam {
                field: "footprint_bytes",
                reason: format!("must be at least L x 8 = {region}, got {}", self.footprint_bytes),
            });
        }
        if !(0.0..=1.0).contains(&self.write_fraction) {
            return Err(TraceError::InvalidParam { field: "write_fraction", reason: "must lie in [0, 1]".into() });
        }
        if self.base.checked_add(self.footprint_bytes).is_none() {
            return Err(TraceError::AddressOverflow { index: 0 });
        }
        Ok(())
    }
}

/// Inverse CDF of a bounded continuous power law with density ~ x^-s on
/// [1, n + 1). For a fixed `u` the result never grows as `s` grows, so
/// traces generated from one seed become monotonically more concentrated
/// as alpha shrinks.
fn power_law_rank(u: f64, s: f64, n: u64) -> u64 {
    let top = (n + 1) as f64;
    let x = if s == 0.0 {
        1.0 + u * n as f64
    } else if (s - 1.0).abs() < 1e-12 {
        top.powf(u)
    } else {
        let e = 1.0 - s;
        (1.0 + u * (top.powf(e) - 1.0)).powf(1.0 / e)
    };
    ((x.floor() as u64).saturating_sub(1)).min(n - 1)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// A stride coprime with `n`, so `rank * stride mod n` scatters hot ranks
/// over the footprint without collisions.
fn scatter_stride(n: u64) -> u64 {
    if n <= 2 {
        return 1;
    }
    let mut k = ((n as f64) * 0.618_033_988_75) as u64;
    while k > 1 && gcd(k, n) != 1 {
        k -= 1;
    }
    k.max(1)
}

/// Locality-controlled generator in the spirit of global data access
/// benchmarks: each visit draws a region from a power law whose skew grows
/// as alpha shrinks (alpha = 1 is uniform) and touches `vector_len`
/// consecutive 8-byte elements from its start.
pub fn gen_apex(params: &LocalityParams) -> Result<Trace, TraceError> {
    params.validate()?;
    let region_bytes = params.vector_len * ELEMENT_BYTES;
    let regions = params.footprint_bytes / region_bytes;
    let exponent = 1.0 / params.alpha - 1.0;
    let stride = scatter_stride(regions);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let offset = rng.gen_range(0..regions);

    let n = params.record_count as usize;
    let mut records = Vec::with_capacity(n);
    'outer: loop {
        let u: f64 = rng.gen();
        let w: f64 = rng.gen();
        let rank = power_law_rank(u, exponent, regions);
        let region = ((rank as u128 * stride as u128 + offset as u128) % regions as u128) as u64;
        // One pc per power-of-two rank class: hot regions share a pc.
        let class = 64 - (rank + 1).leading_zeros() as u64 - 1;
        let pc = APEX_PC_BASE + class * 0x10;
        let op = if w < params.write_fraction { Op::Write } else { Op::Read };
        let start = params.base + region * region_bytes;
        for k in 0..params.vector_len {
            if records.len() == n {
                break 'outer;
            }
            let cycle = records.len() as u64 * params.issue_gap;
            records.push(TraceRecord { pc, addr: start + k * ELEMENT_BYTES, op, cpu_cycle: cycle });
        }
        if records.len() == n {
            break;
        }
    }
    Trace::new(records)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StridedParams {
    pub stride_bytes: u64,
    pub count: u64,
    pub base: u64,
    pub pc: u64,
    #[serde(default = "default_gap")]
    pub issue_gap: u64,
}

impl StridedParams {
    pub fn new(stride_bytes: u64, count: u64, base: u64, pc: u64) -> Self {
        StridedParams { stride_bytes, count, base, pc, issue_gap: DEFAULT_ISSUE_GAP }
    }
}

/// `base, base + stride, base + 2 * stride, ...` from a single pc.
pub fn gen_strided(params: &StridedParams) -> Result<Trace, TraceError> {
    if params.stride_bytes == 0 {
        return Err(TraceError::InvalidParam { field: "stride", reason: "must be at least 1".into() });
    }
    let mut records = Vec::with_capacity(params.count as usize);
    for i in 0..params.count {
        let addr = params
            .stride_bytes
            .checked_mul(i)
            .and_then(|d| params.base.checked_add(d))
            .ok_or(TraceError::AddressOverflow { index: i })?;
        records.push(TraceRecord::read(params.pc, addr, i * params.issue_gap));
    }
    Trace::new(records)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphWalkParams {
    pub node_count: u64,
    pub edge_factor: u64,
    pub walk_len: u64,
    pub seed: u64,
    #[serde(default)]
    pub base: u64,
    #[serde(default = "default_slot")]
    pub slot_bytes: u64,
    #[serde(default = "default_graph_pc")]
    pub pc: u64,
    #[serde(default = "default_gap")]
    pub issue_gap: u64,
}

fn default_slot() -> u64 {
    64
}

fn default_graph_pc() -> u64 {
    0x50_0000
}

impl GraphWalkParams {
    pub fn new(node_count: u64, edge_factor: u64, walk_len: u64, seed: u64) -> Self {
        GraphWalkParams {
            node_count,
            edge_factor,
            walk_len,
            seed,
            base: 0,
            slot_bytes: default_slot(),
            pc: default_graph_pc(),
            issue_gap: DEFAULT_ISSUE_GAP,
        }
    }
}

/// Preferential-attachment graph: a clique of `m + 1` seed nodes, then every
/// new node links to `m` distinct existing nodes chosen with probability
/// proportional to degree.
fn scale_free_adjacency(nodes: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); nodes];
    // Every edge endpoint appears once here, so a uniform pick is degree-weighted.
    let mut endpoints: Vec<u32> = Vec::new();
    let seed_nodes = (m + 1).min(nodes);
    for a in 0..seed_nodes {
        for b in (a + 1)..seed_nodes {
            adj[a].push(b as u32);
            adj[b].push(a as u32);
            endpoints.push(a as u32);
            endpoints.push(b as u32);
        }
    }
    let mut picked: Vec<u32> = Vec::with_capacity(m);
    for v in seed_nodes..nodes {
        picked.clear();
        let want = m.min(v);
        while picked.len() < want {
            let cand = endpoints[rng.gen_range(0..endpoints.len())];
            if !picked.contains(&cand) {
                picked.push(cand);
            }
        }
        for &u in &picked {
            adj[v].push(u);
            adj[u as usize].push(v as u32);
            endpoints.push(u);
            endpoints.push(v as u32);
        }
    }
    adj
}

/// Random walk over a seeded scale-free graph; every visited node reads its
/// own array slot.
pub fn gen_graph_walk(params: &GraphWalkParams) -> Result<Trace, TraceError> {
    if params.node_count < 2 {
        return Err(TraceError::InvalidParam { field: "node_count", reason: "must be at least 2".into() });
    }
    if params.edge_factor == 0 {
        return Err(TraceError::InvalidParam { field: "edge_factor", reason: "must be at least 1".into() });
    }
    if params.node_count > u32::MAX as u64 {
        return Err(TraceError::InvalidParam { field: "node_count", reason: "too many nodes".into() });
    }
    params
        .node_count
        .checked_mul(params.slot_bytes)
        .and_then(|span| params.base.checked_add(span))
        .ok_or(TraceError::AddressOverflow { index: 0 })?;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let adj = scale_free_adjacency(params.node_count as usize, params.edge_factor as usize, &mut rng);
    let mut node = rng.gen_range(0..params.node_count as usize);
    let mut records = Vec::with_capacity(params.walk_len as usize);
    for i in 0..params.walk_len {
        let addr = params.base + node as u64 * params.slot_bytes;
        records.push(TraceRecord::read(params.pc, addr, i * params.issue_gap));
        let nbrs = &adj[node];
        node = nbrs[rng.gen_range(0..nbrs.len())] as usize;
    }
    Trace::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn strided_definition() {
        let t = gen_strided(&StridedParams::new(64, 4, 0, 7)).unwrap();
        let a: Vec<u64> = t.records().iter().map(|r| r.addr).collect();
        assert_eq!(a, vec![0, 64, 128, 192]);
        assert!(t.records().iter().all(|r| r.pc == 7));

        let t = gen_strided(&StridedParams::new(4096, 3, 1 << 32, 7)).unwrap();
        let a: Vec<u64> = t.records().iter().map(|r| r.addr).collect();
        assert_eq!(a, vec![1 << 32, (1 << 32) + 4096, (1 << 32) + 8192]);

        assert!(gen_strided(&StridedParams::new(64, 0, 0, 7)).unwrap().is_empty());
    }

    #[test]
    fn strided_rejects_overflow_and_zero_stride() {
        assert!(matches!(
            gen_strided(&StridedParams::new(1 << 62, 8, 0, 0)),
            Err(TraceError::AddressOverflow { index: 4 })
        ));
        assert!(matches!(gen_strided(&StridedParams::new(0, 8, 0, 0)), Err(TraceError::InvalidParam { .. })));
    }

    #[test]
    fn apex_rejects_bad_params() {
        for alpha in [0.0, -0.5, 1.5, f64::NAN] {
            let p = LocalityParams::new(alpha, 1, 1 << 20, 10, 1);
            assert!(matches!(gen_apex(&p), Err(TraceError::InvalidParam { field: "alpha", .. })));
        }
        let p = LocalityParams::new(0.5, 64, 511, 10, 1);
        assert!(matches!(gen_apex(&p), Err(TraceError::InvalidParam { field: "footprint_bytes", .. })));
        let p = LocalityParams::new(0.5, 0, 1 << 20, 10, 1);
        assert!(matches!(gen_apex(&p), Err(TraceError::InvalidParam { field: "L", .. })));
    }

    #[test]
    fn apex_emits_vectors_inside_footprint() {
        let p = LocalityParams::new(0.3, 8, 1 << 16, 1000, 9);
        let t = gen_apex(&p).unwrap();
        assert_eq!(t.len(), 1000);
        for chunk in t.records().chunks(8) {
            for (k, r) in chunk.iter().enumerate() {
                assert_eq!(r.addr, chunk[0].addr + 8 * k as u64);
                assert!(r.addr < 1 << 16);
            }
            assert_eq!(chunk[0].addr % 64, 0);
        }
    }

    #[test]
    fn apex_is_deterministic() {
        let p = LocalityParams::new(0.2, 4, 1 << 20, 5000, 42);
        assert_eq!(gen_apex(&p).unwrap(), gen_apex(&p).unwrap());
        let q = LocalityParams { seed: 43, ..p.clone() };
        assert_ne!(gen_apex(&p).unwrap(), gen_apex(&q).unwrap());
    }

    #[test]
    fn power_law_rank_is_monotone_in_skew() {
        for &u in &[0.0, 0.1, 0.5, 0.9, 0.999] {
            let mut prev = u64::MAX;
            for s in [0.0, 0.25, 1.0, 3.0, 9.0, 99.0] {
                let r = power_law_rank(u, s, 1000);
                assert!(r <= prev, "u={u} s={s}");
                prev = r;
            }
        }
        assert_eq!(power_law_rank(0.999_999, 0.0, 10), 9);
    }

    #[test]
    fn graph_walk_two_nodes_alternates() {
        let t = gen_graph_walk(&GraphWalkParams::new(2, 1, 5, 3)).unwrap();
        let a: Vec<u64> = t.records().iter().map(|r| r.addr).collect();
        assert_eq!(a.len(), 5);
        let distinct: HashSet<u64> = a.iter().copied().collect();
        assert_eq!(distinct.len(), 2);
        assert!(a.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn graph_walk_is_deterministic() {
        let p = GraphWalkParams::new(1000, 3, 2000, 11);
        assert_eq!(gen_graph_walk(&p).unwrap(), gen_graph_walk(&p).unwrap());
    }

    #[test]
    fn graph_is_scale_free_ish() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let adj = scale_free_adjacency(5000, 2, &mut rng);
        let max_deg = adj.iter().map(Vec::len).max().unwrap();
        let mean = adj.iter().map(Vec::len).sum::<usize>() as f64 / adj.len() as f64;
        // hubs far above the mean degree are the signature of preferential attachment
        assert!(max_deg as f64 > 10.0 * mean, "max {max_deg} mean {mean}");
    }
}
