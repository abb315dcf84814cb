use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Op, Trace};

/// Number of distinct 64-byte lines touched.
pub fn footprint_lines(trace: &Trace) -> usize {
    let mut lines: Vec<u64> = trace.records().iter().map(|r| r.line()).collect();
    lines.sort_unstable();
    lines.dedup();
    lines.len()
}

/// LRU stack distance of every re-reference, in trace order: the number of
/// distinct other lines touched since the previous access to the same line.
/// First touches have no distance and are skipped.
pub fn reuse_distances(trace: &Trace) -> Vec<u64> {
    let n = trace.len();
    // Fenwick tree over positions; a 1 marks the latest access of some line.
    let mut tree = vec![0i64; n + 1];
    let add = |tree: &mut Vec<i64>, mut i: usize, v: i64| {
        i += 1;
        while i <= n {
            tree[i] += v;
            i += i & i.wrapping_neg();
        }
    };
    let prefix = |tree: &Vec<i64>, mut i: usize| -> i64 {
        let mut s = 0;
        while i > 0 {
            s += tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    };
    let mut last: HashMap<u64, usize> = HashMap::new();
    let mut out = Vec::new();
    for (i, r) in trace.records().iter().enumerate() {
        if let Some(prev) = last.insert(r.line(), i) {
            let between = prefix(&tree, i) - prefix(&tree, prev + 1);
            out.push(between as u64);
            add(&mut tree, prev, -1);
        }
        add(&mut tree, i, 1);
    }
    out
}

/// Share of accesses that go to the hottest `ceil(fraction * footprint)` lines.
pub fn top_share(trace: &Trace, fraction: f64) -> f64 {
    if trace.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<u64, u64> = HashMap::new();
    for r in trace.records() {
        *counts.entry(r.line()).or_default() += 1;
    }
    let mut c: Vec<u64> = counts.into_values().collect();
    c.sort_unstable_by(|a, b| b.cmp(a));
    let k = ((fraction * c.len() as f64).ceil() as usize).clamp(1, c.len());
    c[..k].iter().sum::<u64>() as f64 / trace.len() as f64
}

fn quantile(sorted: &[u64], q: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    Some(sorted[idx])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub records: usize,
    pub footprint_lines: usize,
    pub footprint_bytes: u64,
    pub reuse_median: Option<u64>,
    pub reuse_p90: Option<u64>,
    pub read_ratio: f64,
    pub cores: usize,
}

impl TraceSummary {
    pub fn of(trace: &Trace) -> Self {
        let lines = footprint_lines(trace);
        let mut d = reuse_distances(trace);
        d.sort_unstable();
        let reads = trace.records().iter().filter(|r| r.op == Op::Read).count();
        TraceSummary {
            records: trace.len(),
            footprint_lines: lines,
            footprint_bytes: lines as u64 * super::LINE_BYTES,
            reuse_median: quantile(&d, 0.5),
            reuse_p90: quantile(&d, 0.9),
            read_ratio: if trace.is_empty() { 0.0 } else { reads as f64 / trace.len() as f64 },
            cores: trace.core_ids().len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceRecord;

    fn lines(ls: &[u64]) -> Trace {
        Trace::new(ls.iter().enumerate().map(|(i, &l)| TraceRecord::read(0, l * 64, i as u64)).collect()).unwrap()
    }

    // quadratic reference implementation
    fn naive(ls: &[u64]) -> Vec<u64> {
        let mut out = Vec::new();
        for i in 0..ls.len() {
            if let Some(p) = (0..i).rev().find(|&j| ls[j] == ls[i]) {
                let mut d: Vec<u64> = ls[p + 1..i].to_vec();
                d.sort_unstable();
                d.dedup();
                out.push(d.len() as u64);
            }
        }
        out
    }

    #[test]
    fn reuse_matches_naive() {
        let seq = [1, 2, 3, 1, 2, 2, 4, 1, 5, 3, 3, 1];
        assert_eq!(reuse_distances(&lines(&seq)), naive(&seq));
        assert_eq!(reuse_distances(&lines(&[1, 2, 3, 1])), vec![2]);
    }

    #[test]
    fn footprint_and_top_share() {
        let t = lines(&[0, 0, 0, 1, 2, 3]);
        assert_eq!(footprint_lines(&t), 4);
        assert!((top_share(&t, 0.25) - 0.5).abs() < 1e-12);
        let s = TraceSummary::of(&t);
        assert_eq!(s.footprint_bytes, 256);
        assert_eq!(s.reuse_median, Some(0));
    }
}
