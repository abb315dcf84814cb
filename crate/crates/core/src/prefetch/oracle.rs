//! Future-knowledge address source with a single effectiveness knob `f`:
//! each future line is prefetched with probability `f`, and useless lines
//! are mixed in so that accuracy also equals `f`.

use sha2::{Digest, Sha256};

/// Deterministic uniform value in [0, 1) for entry `index`.
fn unit_hash(seed: u64, index: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().unwrap());
    (v >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Clone, Debug)]
pub struct OracleSource {
    /// (record index, host line) for every change of line in this
    /// device's demand stream.
    future: Vec<(u64, u64)>,
    coverage: f64,
    accuracy: f64,
    seed: u64,
    junk_next: u64,
    junk_limit: u64,
    junk_credit: f64,
    junk_issued: u64,
}

/// A line the oracle wants prefetched. `step` counts future accesses from
/// the observation, starting at 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleLine {
    pub line: u64,
    pub step: usize,
    pub junk: bool,
}

impl OracleSource {
    /// `junk_lines` is a range of device-homed lines never demanded by the
    /// trace.
    pub fn new(future: Vec<(u64, u64)>, coverage: f64, accuracy: f64, seed: u64, junk_lines: (u64, u64)) -> Self {
        OracleSource {
            future,
            coverage,
            accuracy,
            seed,
            junk_next: junk_lines.0,
            junk_limit: junk_lines.1,
            junk_credit: 0.0,
            junk_issued: 0,
        }
    }

    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn junk_issued(&self) -> u64 {
        self.junk_issued
    }

    /// The next `degree` line changes after `record`, each kept iff its
    /// hash falls below the coverage knob.
    pub fn upcoming(&self, record: u64, degree: usize) -> Vec<OracleLine> {
        let start = self.future.partition_point(|&(idx, _)| idx <= record);
        self.future[start..]
            .iter()
            .take(degree)
            .enumerate()
            .filter(|&(i, _)| unit_hash(self.seed, (start + i) as u64) < self.coverage)
            .map(|(i, &(_, line))| OracleLine { line, step: i + 1, junk: false })
            .collect()
    }

    /// Called once per useful line actually issued; returns the useless
    /// lines that keep accuracy at the configured level.
    pub fn junk_for_issue(&mut self) -> Vec<u64> {
        if self.accuracy >= 1.0 || self.accuracy <= 0.0 {
            return Vec::new();
        }
        self.junk_credit += (1.0 - self.accuracy) / self.accuracy;
        let mut out = Vec::new();
        while self.junk_credit >= 1.0 && self.junk_next < self.junk_limit {
            self.junk_credit -= 1.0;
            out.push(self.junk_next);
            self.junk_next += crate::trace::LINE_BYTES;
            self.junk_issued += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn future(n: u64) -> Vec<(u64, u64)> {
        (0..n).map(|i| (i, i * 64)).collect()
    }

    #[test]
    fn full_coverage_returns_next_lines() {
        let o = OracleSource::new(future(10), 1.0, 1.0, 0, (0, 0));
        let lines: Vec<u64> = o.upcoming(3, 2).iter().map(|l| l.line).collect();
        assert_eq!(lines, vec![4 * 64, 5 * 64]);
        assert!(o.upcoming(9, 2).is_empty());
        assert!(OracleSource::new(future(10), 0.0, 0.0, 0, (0, 0)).upcoming(0, 5).is_empty());
    }

    #[test]
    fn coverage_fraction_is_respected() {
        let o = OracleSource::new(future(20_001), 0.3, 0.3, 5, (0, 0));
        let kept = (0..20_000).filter(|&r| !o.upcoming(r, 1).is_empty()).count();
        assert!((kept as f64 / 20_000.0 - 0.3).abs() < 0.02, "{kept}");
    }

    #[test]
    fn junk_keeps_accuracy() {
        let mut o = OracleSource::new(future(1), 0.25, 0.25, 0, (1 << 40, 1 << 41));
        let junk: usize = (0..100).map(|_| o.junk_for_issue().len()).sum();
        assert_eq!(junk, 300);
    }
}
