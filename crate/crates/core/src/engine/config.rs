use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cache::HostCacheConfig;
use crate::device::DeviceConfig;
use crate::units::Latency;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpuConfig {
    #[serde(default = "default_freq")]
    pub freq_mhz: u64,
    /// Outstanding accesses beyond L1 allowed per core.
    #[serde(default = "default_outstanding")]
    pub max_outstanding: usize,
    #[serde(default = "default_ipa")]
    pub instructions_per_access: u64,
}

fn default_freq() -> u64 {
    3600
}
fn default_outstanding() -> usize {
    16
}
fn default_ipa() -> u64 {
    10
}

impl Default for CpuConfig {
    fn default() -> Self {
        CpuConfig { freq_mhz: default_freq(), max_outstanding: default_outstanding(), instructions_per_access: default_ipa() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    /// The first `local_dram_bytes` are host DRAM; the rest is spread over
    /// the CXL endpoints.
    #[default]
    Cxl,
    /// Every address is host DRAM.
    LocalDram,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    #[serde(default)]
    pub mode: MemoryMode,
    #[serde(default)]
    pub local_dram_bytes: u64,
    #[serde(default = "default_local_latency")]
    pub local_latency_ns: Latency,
    /// Endpoint interleave granularity.
    #[serde(default = "default_interleave")]
    pub interleave_bytes: u64,
}

fn default_local_latency() -> Latency {
    Latency::from_ns(66.0)
}
fn default_interleave() -> u64 {
    1 << 30
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            mode: MemoryMode::Cxl,
            local_dram_bytes: 0,
            local_latency_ns: default_local_latency(),
            interleave_bytes: default_interleave(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FabricConfig {
    /// Extra one-way latency of a CXL.io notification over CXL.mem.
    #[serde(default = "default_io_overhead")]
    pub io_overhead_ns: Latency,
}

fn default_io_overhead() -> Latency {
    Latency::from_ns(30.0)
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig { io_overhead_ns: default_io_overhead() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timeliness {
    /// Subtract the full end-to-end latency, switches included.
    #[default]
    Aware,
    /// Subtract only the declared device latency plus the endpoint's own link.
    Unaware,
}

fn default_degree() -> usize {
    4
}
fn default_entries() -> usize {
    crate::prefetch::baselines::TEMPORAL_ENTRIES
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum PrefetcherSpec {
    #[default]
    None,
    Spatial {
        #[serde(default = "default_degree")]
        degree: usize,
    },
    Temporal {
        #[serde(default = "default_degree")]
        degree: usize,
        #[serde(default = "default_entries")]
        entries: usize,
    },
    Expand {
        weights: Option<PathBuf>,
        #[serde(default = "default_degree")]
        degree: usize,
        #[serde(default)]
        margin_ns: Latency,
        #[serde(default)]
        timeliness: Timeliness,
        #[serde(default = "default_true")]
        online: bool,
    },
    Oracle {
        coverage: f64,
        /// Defaults to `coverage`.
        #[serde(default)]
        accuracy: Option<f64>,
        #[serde(default = "default_degree")]
        degree: usize,
        #[serde(default)]
        margin_ns: Latency,
        #[serde(default)]
        timeliness: Timeliness,
    },
}


impl PrefetcherSpec {
    pub fn id(&self) -> &'static str {
        match self {
            PrefetcherSpec::None => "none",
            PrefetcherSpec::Spatial { .. } => "spatial",
            PrefetcherSpec::Temporal { .. } => "temporal",
            PrefetcherSpec::Expand { .. } => "expand",
            PrefetcherSpec::Oracle { .. } => "oracle",
        }
    }

    /// Device-side prefetchers see demand reads and hit notifications.
    pub fn is_device_side(&self) -> bool {
        matches!(self, PrefetcherSpec::Expand { .. } | PrefetcherSpec::Oracle { .. })
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let degree = |d: usize, errs: &mut Vec<String>| {
            if d == 0 {
                errs.push("prefetcher.degree: must be at least 1".into());
            }
        };
        match self {
            PrefetcherSpec::None => {}
            PrefetcherSpec::Spatial { degree: d } => degree(*d, &mut errs),
            PrefetcherSpec::Temporal { degree: d, entries } => {
                degree(*d, &mut errs);
                if *entries == 0 {
                    errs.push("prefetcher.entries: must be at least 1".into());
                }
            }
            PrefetcherSpec::Expand { weights, degree: d, .. } => {
                degree(*d, &mut errs);
                if weights.is_none() {
                    errs.push("prefetcher.weights: required for prefetcher `expand`".into());
                }
            }
            PrefetcherSpec::Oracle { coverage, accuracy, degree: d, .. } => {
                degree(*d, &mut errs);
                if !(0.0..=1.0).contains(coverage) {
                    errs.push("prefetcher.coverage: must be within [0, 1]".into());
                }
                if let Some(a) = accuracy {
                    if !(0.0..=1.0).contains(a) {
                        errs.push("prefetcher.accuracy: must be within [0, 1]".into());
                    }
                }
            }
        }
        errs
    }
}

/// Everything about a run except the trace, topology and prefetcher.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub cpu: CpuConfig,
    #[serde(default)]
    pub cache: HostCacheConfig,
    #[serde(default)]
    pub device: DeviceConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub fabric: FabricConfig,
}

impl SimConfig {
    pub fn local_dram() -> Self {
        SimConfig { memory: MemoryConfig { mode: MemoryMode::LocalDram, ..MemoryConfig::default() }, ..SimConfig::default() }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.cpu.freq_mhz == 0 {
            errs.push("cpu.freq_mhz: must be positive".into());
        }
        if self.cpu.max_outstanding == 0 {
            errs.push("cpu.max_outstanding: must be at least 1".into());
        }
        if self.cpu.instructions_per_access == 0 {
            errs.push("cpu.instructions_per_access: must be at least 1".into());
        }
        errs.extend(self.cache.validate());
        errs.extend(self.device.validate());
        let m = &self.memory;
        if m.interleave_bytes < crate::trace::LINE_BYTES || !m.interleave_bytes.is_multiple_of(crate::trace::LINE_BYTES) {
            errs.push("memory.interleave_bytes: must be a positive multiple of 64".into());
        }
        if !m.local_dram_bytes.is_multiple_of(crate::trace::LINE_BYTES) {
            errs.push("memory.local_dram_bytes: must be a multiple of 64".into());
        }
        errs
    }
}

/// A complete run description as read from a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub trace: PathBuf,
    pub topology: PathBuf,
    #[serde(default)]
    pub prefetcher: PrefetcherSpec,
    /// Prefetcher whose run the speedup is measured against.
    #[serde(default)]
    pub baseline: Option<PrefetcherSpec>,
    #[serde(default, flatten)]
    pub sim: SimConfig,
    #[serde(default)]
    pub seed: u64,
}

const RUN_KEYS: [&str; 10] =
    ["trace", "topology", "prefetcher", "baseline", "cpu", "cache", "device", "memory", "fabric", "seed"];

fn section<T: for<'de> Deserialize<'de> + Default>(obj: &serde_json::Map<String, Value>, key: &str, errs: &mut Vec<String>) -> T {
    match obj.get(key) {
        None => T::default(),
        Some(v) => serde_json::from_value(v.clone()).unwrap_or_else(|e| {
            errs.push(format!("{key}: {e}"));
            T::default()
        }),
    }
}

impl RunConfig {
    /// Parses and validates, collecting every problem rather than stopping
    /// at the first.
    pub fn from_json(text: &str) -> Result<RunConfig, Vec<String>> {
        let value: Value = serde_json::from_str(text).map_err(|e| vec![format!("config: {e}")])?;
        let Value::Object(obj) = value else { return Err(vec!["config: expected a JSON object".into()]) };
        let mut errs = Vec::new();
        for k in obj.keys() {
            if !RUN_KEYS.contains(&k.as_str()) {
                errs.push(format!("{k}: unknown field"));
            }
        }
        let path = |key: &str, errs: &mut Vec<String>| match obj.get(key) {
            Some(Value::String(s)) => PathBuf::from(s),
            Some(_) => {
                errs.push(format!("{key}: expected a path string"));
                PathBuf::new()
            }
            None => {
                errs.push(format!("{key}: missing required field"));
                PathBuf::new()
            }
        };
        let trace = path("trace", &mut errs);
        let topology = path("topology", &mut errs);
        let prefetcher: PrefetcherSpec = section(&obj, "prefetcher", &mut errs);
        let baseline: Option<PrefetcherSpec> = section(&obj, "baseline", &mut errs);
        let sim = SimConfig {
            cpu: section(&obj, "cpu", &mut errs),
            cache: section(&obj, "cache", &mut errs),
            device: section(&obj, "device", &mut errs),
            memory: section(&obj, "memory", &mut errs),
            fabric: section(&obj, "fabric", &mut errs),
        };
        let seed: u64 = section(&obj, "seed", &mut errs);
        let cfg = RunConfig { trace, topology, prefetcher, baseline, sim, seed };
        errs.extend(cfg.validate());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(errs)
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.prefetcher.validate();
        if let Some(b) = &self.baseline {
            errs.extend(b.validate().into_iter().map(|e| format!("baseline.{}", e.trim_start_matches("prefetcher."))));
        }
        errs.extend(self.sim.validate());
        if self.sim.memory.mode == MemoryMode::LocalDram && self.prefetcher != PrefetcherSpec::None {
            errs.push("prefetcher: memory.mode `local_dram` has no CXL device to prefetch from".into());
        }
        errs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_json(r#"{"trace": "t.xptr", "topology": "topo.json"}"#).unwrap();
        assert_eq!(c.prefetcher, PrefetcherSpec::None);
        assert_eq!(c.sim, SimConfig::default());
        assert_eq!(c.sim.cpu.max_outstanding, 16);
    }

    #[test]
    fn every_problem_is_listed() {
        let errs = RunConfig::from_json(
            r#"{"topology": 3, "bogus": 1, "prefetcher": {"id": "expand"}, "cpu": {"max_outstanding": 0}}"#,
        )
        .unwrap_err();
        let joined = errs.join("\n");
        for needle in ["bogus: unknown field", "trace: missing", "topology: expected", "prefetcher.weights", "cpu.max_outstanding"] {
            assert!(joined.contains(needle), "{needle} not in {joined}");
        }
    }

    #[test]
    fn prefetcher_variants_parse() {
        let p: PrefetcherSpec = serde_json::from_str(r#"{"id": "oracle", "coverage": 0.5, "margin_ns": 100}"#).unwrap();
        assert_eq!(
            p,
            PrefetcherSpec::Oracle {
                coverage: 0.5,
                accuracy: None,
                degree: 4,
                margin_ns: Latency::from_ns(100.0),
                timeliness: Timeliness::Aware
            }
        );
        assert!(serde_json::from_str::<PrefetcherSpec>(r#"{"id": "spatial", "x": 1}"#).is_err());
    }
}
