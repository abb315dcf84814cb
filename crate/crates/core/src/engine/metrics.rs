use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{PrefetcherSpec, RunConfig, SimConfig};
use crate::device::DeviceStats;
use crate::topology::TopologySpec;
use crate::trace::{write_trace, Trace};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelCounts {
    pub l1: u64,
    pub l2: u64,
    pub llc: u64,
    pub reflector: u64,
    /// Misses, including accesses merged into an outstanding miss.
    pub miss: u64,
    pub merged: u64,
}

impl LevelCounts {
    pub fn total(&self) -> u64 {
        self.l1 + self.l2 + self.llc + self.reflector + self.miss
    }

    /// Accesses that went past the LLC.
    pub fn llc_misses(&self) -> u64 {
        self.reflector + self.miss
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrefetchCounts {
    /// Prefetch reads started by a device.
    pub issued: u64,
    /// Lines inserted into the reflector buffer.
    pub delivered: u64,
    /// Delivered lines later hit by a demand.
    pub used: u64,
    pub accuracy: f64,
    pub coverage: f64,
    /// Rejected because the host held a dirty copy.
    pub stale: u64,
    /// The demand reached the buffer before the data did.
    pub late: u64,
    /// The LLC already held the line.
    pub redundant: u64,
    /// Dropped as a duplicate of an in-flight device read.
    pub suppressed: u64,
    /// Predicted lines not homed on the predicting device.
    pub unroutable: u64,
    /// Evicted from the buffer before use.
    pub evicted_unused: u64,
}

/// Identifies the trace a report was produced from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFingerprint {
    pub records: u64,
    pub sha256: String,
}

impl TraceFingerprint {
    pub fn of(trace: &Trace) -> Self {
        let mut bytes = Vec::new();
        write_trace(trace, &mut bytes).expect("writing to memory");
        TraceFingerprint { records: trace.len() as u64, sha256: hex::encode(Sha256::digest(&bytes)) }
    }
}

/// The fully resolved inputs of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    /// The config file the run came from, when there was one.
    pub run: Option<RunConfig>,
    pub trace: TraceFingerprint,
    pub topology: TopologySpec,
    pub prefetcher: PrefetcherSpec,
    pub sim: SimConfig,
    pub seed: u64,
    pub weights_sha256: Option<String>,
}

impl ResolvedRun {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub prefetcher: String,
    pub records: u64,
    pub instructions: u64,
    pub instructions_per_access: u64,
    pub hits: LevelCounts,
    pub mpki: f64,
    pub prefetch: PrefetchCounts,
    pub total_cycles: u64,
    pub stall_cycles: u64,
    pub mean_latency_cycles: f64,
    pub mean_latency_ns: f64,
    pub exec_time_ns: f64,
    pub baseline: Option<String>,
    pub speedup: Option<f64>,
    pub max_reflector_occupancy: usize,
    pub notifications: u64,
    pub writebacks: u64,
    pub internal_cache_scale: f64,
    pub devices: Vec<DeviceStats>,
    pub config: ResolvedRun,
    pub config_hash: String,
}

impl MetricsReport {
    /// Fills the speedup of this run relative to `baseline`.
    pub fn with_speedup(mut self, name: &str, baseline: &MetricsReport) -> Self {
        self.baseline = Some(name.to_string());
        self.speedup = Some(speedup(baseline.total_cycles, self.total_cycles));
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub const CSV_HEADER: [&'static str; 27] = [
        "prefetcher",
        "records",
        "l1_hits",
        "l2_hits",
        "llc_hits",
        "reflector_hits",
        "misses",
        "merged",
        "mpki",
        "issued",
        "delivered",
        "used",
        "accuracy",
        "coverage",
        "stale",
        "late",
        "redundant",
        "suppressed",
        "total_cycles",
        "stall_cycles",
        "mean_latency_ns",
        "exec_time_ns",
        "speedup",
        "max_reflector_occupancy",
        "notifications",
        "writebacks",
        "config_hash",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        let h = &self.hits;
        let p = &self.prefetch;
        vec![
            self.prefetcher.clone(),
            self.records.to_string(),
            h.l1.to_string(),
            h.l2.to_string(),
            h.llc.to_string(),
            h.reflector.to_string(),
            h.miss.to_string(),
            h.merged.to_string(),
            self.mpki.to_string(),
            p.issued.to_string(),
            p.delivered.to_string(),
            p.used.to_string(),
            p.accuracy.to_string(),
            p.coverage.to_string(),
            p.stale.to_string(),
            p.late.to_string(),
            p.redundant.to_string(),
            p.suppressed.to_string(),
            self.total_cycles.to_string(),
            self.stall_cycles.to_string(),
            self.mean_latency_ns.to_string(),
            self.exec_time_ns.to_string(),
            self.speedup.map_or(String::new(), |s| s.to_string()),
            self.max_reflector_occupancy.to_string(),
            self.notifications.to_string(),
            self.writebacks.to_string(),
            self.config_hash.clone(),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER).expect("in-memory csv");
        w.write_record(self.csv_row()).expect("in-memory csv");
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }

    pub fn weights_path(&self) -> Option<&PathBuf> {
        match &self.config.prefetcher {
            PrefetcherSpec::Expand { weights, .. } => weights.as_ref(),
            _ => None,
        }
    }
}

/// Ratio of baseline to measured cycles; equal runs give exactly 1.
pub fn speedup(baseline_cycles: u64, cycles: u64) -> f64 {
    if baseline_cycles == cycles {
        1.0
    } else if cycles == 0 {
        f64::INFINITY
    } else {
        baseline_cycles as f64 / cycles as f64
    }
}

pub fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
