//! Fixed-length description of a window used by the behavior classifier.

use std::collections::{HashMap, HashSet};

use super::window::{SlidingWindow, WindowEntry};
use crate::trace::LINE_BYTES;

pub const STRIDE_BINS: usize = 8;
pub const FEATURES: usize = STRIDE_BINS + 5;

pub const FEATURE_NAMES: [&str; FEATURES] = [
    "stride_0",
    "stride_+1",
    "stride_-1",
    "stride_+2..8",
    "stride_-2..8",
    "stride_+9..64",
    "stride_-9..64",
    "stride_far",
    "unique_pc_frac",
    "reuse_frac",
    "reuse_median",
    "reuse_p90",
    "read_ratio",
];

pub type FeatureVec = [f64; FEATURES];

fn stride_bin(delta: i64) -> usize {
    match delta {
        0 => 0,
        1 => 1,
        -1 => 2,
        2..=8 => 3,
        -8..=-2 => 4,
        9..=64 => 5,
        -64..=-9 => 6,
        _ => 7,
    }
}

/// Line-granular delta between two byte-aligned line addresses.
pub fn line_delta(from: u64, to: u64) -> i64 {
    (to as i64).wrapping_sub(from as i64) / LINE_BYTES as i64
}

pub fn extract(window: &SlidingWindow) -> FeatureVec {
    let entries: Vec<&WindowEntry> = window.iter().collect();
    extract_entries(&entries)
}

pub fn extract_entries(entries: &[&WindowEntry]) -> FeatureVec {
    let mut f = [0.0; FEATURES];
    let n = entries.len();
    if n == 0 {
        return f;
    }
    if n > 1 {
        for w in entries.windows(2) {
            f[stride_bin(line_delta(w[0].line, w[1].line))] += 1.0;
        }
        for v in &mut f[..STRIDE_BINS] {
            *v /= (n - 1) as f64;
        }
    }
    let pcs: HashSet<u64> = entries.iter().map(|e| e.pc).collect();
    f[STRIDE_BINS] = pcs.len() as f64 / n as f64;

    // reuse distance in window positions, normalized by length
    let mut last: HashMap<u64, usize> = HashMap::new();
    let mut dists = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        if let Some(p) = last.insert(e.line, i) {
            dists.push((i - p) as f64 / n as f64);
        }
    }
    f[STRIDE_BINS + 1] = dists.len() as f64 / n as f64;
    if !dists.is_empty() {
        dists.sort_by(f64::total_cmp);
        let q = |p: f64| dists[((dists.len() - 1) as f64 * p).round() as usize];
        f[STRIDE_BINS + 2] = q(0.5);
        f[STRIDE_BINS + 3] = q(0.9);
    }
    f[STRIDE_BINS + 4] = entries.iter().filter(|e| e.is_read).count() as f64 / n as f64;
    f
}
