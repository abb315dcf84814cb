//! Discrete-event simulation core: a bounded-outstanding-miss CPU model
//! driving the host caches, the fabric, the devices and the prefetchers.

pub mod address;
pub mod config;
pub mod event;
pub mod metrics;
pub mod sim;
pub mod sweep;

pub use address::{AddressMap, Home};
pub use config::{CpuConfig, FabricConfig, MemoryConfig, MemoryMode, PrefetcherSpec, RunConfig, SimConfig, Timeliness};
pub use metrics::{speedup, LevelCounts, MetricsReport, PrefetchCounts, ResolvedRun, TraceFingerprint};
pub use sim::{EngineError, Prefetcher, Simulation};
pub use sweep::{sweep_effectiveness, sweep_switch_depth, write_sweep_csv, OracleTemplate, SweepPoint};

use crate::topology::Topology;
use crate::trace::Trace;

/// Simulates `trace` to completion.
pub fn run(trace: &Trace, topology: &Topology, prefetcher: &Prefetcher, config: &SimConfig, seed: u64) -> Result<MetricsReport, EngineError> {
    Simulation::new(trace, topology, prefetcher, config, seed)?.run()
}
