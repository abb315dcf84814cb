use std::io::Write;

use rayon::prelude::*;

use super::config::{MemoryMode, PrefetcherSpec, SimConfig, Timeliness};
use super::metrics::MetricsReport;
use super::sim::{EngineError, Prefetcher};
use super::run;
use crate::topology::{Topology, DEFAULT_LINK_NS, DEFAULT_SWITCH_NS};
use crate::trace::Trace;
use crate::units::Latency;

/// One sweep point: its knob values, in column order, and its report.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub knobs: Vec<(String, String)>,
    pub report: MetricsReport,
}

/// Oracle settings shared by every point of an effectiveness sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleTemplate {
    pub degree: usize,
    pub margin_ns: Latency,
    pub timeliness: Timeliness,
}

impl Default for OracleTemplate {
    fn default() -> Self {
        OracleTemplate { degree: 4, margin_ns: Latency::ZERO, timeliness: Timeliness::Aware }
    }
}

fn pool() -> rayon::ThreadPool {
    let threads = std::env::var("XPAND_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).unwrap_or(0);
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool")
}

type Job = (Vec<(String, String)>, Topology, Prefetcher, SimConfig);

fn run_all(jobs: Vec<Job>, trace: &Trace, seed: u64) -> Result<Vec<SweepPoint>, EngineError> {
    pool().install(|| {
        jobs.into_par_iter()
            .map(|(knobs, topo, pf, cfg)| Ok(SweepPoint { knobs, report: run(trace, &topo, &pf, &cfg, seed)? }))
            .collect()
    })
}

/// Oracle prefetching at each effectiveness level, accuracy tied to
/// coverage. Every point carries its speedup over no prefetching. The
/// last point is the same trace on local DRAM, with level `local`.
pub fn sweep_effectiveness(
    trace: &Trace,
    topology: &Topology,
    levels: &[f64],
    oracle: OracleTemplate,
    config: &SimConfig,
    seed: u64,
) -> Result<Vec<SweepPoint>, EngineError> {
    let bad: Vec<String> = levels.iter().filter(|f| !(0.0..=1.0).contains(*f)).map(|f| format!("levels: {f} outside [0, 1]")).collect();
    if !bad.is_empty() {
        return Err(EngineError::Config(bad));
    }
    let knob = |f: String| vec![("level".to_string(), f)];
    let mut jobs = vec![(knob("none".into()), topology.clone(), Prefetcher::none(), *config)];
    for &f in levels {
        let spec = PrefetcherSpec::Oracle {
            coverage: f,
            accuracy: Some(f),
            degree: oracle.degree,
            margin_ns: oracle.margin_ns,
            timeliness: oracle.timeliness,
        };
        jobs.push((knob(f.to_string()), topology.clone(), Prefetcher::new(spec), *config));
    }
    let local = SimConfig { memory: super::config::MemoryConfig { mode: MemoryMode::LocalDram, ..config.memory }, ..*config };
    jobs.push((knob("local".into()), topology.clone(), Prefetcher::none(), local));
    let mut points = run_all(jobs, trace, seed)?;
    let base = points.remove(0).report;
    Ok(points.into_iter().map(|p| SweepPoint { report: p.report.with_speedup("none", &base), knobs: p.knobs }).collect())
}

fn with_timeliness(spec: &PrefetcherSpec, t: Timeliness) -> PrefetcherSpec {
    let mut s = spec.clone();
    match &mut s {
        PrefetcherSpec::Expand { timeliness, .. } | PrefetcherSpec::Oracle { timeliness, .. } => *timeliness = t,
        _ => {}
    }
    s
}

/// Spliced-in switches on every endpoint path, with default switch and
/// link latencies.
pub fn deepen(base: &Topology, depth: u32) -> Result<Topology, EngineError> {
    let mut t = base.clone();
    for ep in base.endpoints() {
        for _ in 0..depth {
            t.insert_switch(ep, Latency::from_ns(DEFAULT_SWITCH_NS), Latency::from_ns(DEFAULT_LINK_NS))?;
        }
    }
    Ok(t)
}

/// Runs `prefetcher` with `depths` extra switch layers, topology-aware
/// and topology-unaware. Points come in depth order, aware first.
pub fn sweep_switch_depth(
    trace: &Trace,
    base: &Topology,
    depths: &[u32],
    prefetcher: &Prefetcher,
    config: &SimConfig,
    seed: u64,
) -> Result<Vec<SweepPoint>, EngineError> {
    let mut jobs = Vec::new();
    for &d in depths {
        let topo = deepen(base, d)?;
        for t in [Timeliness::Aware, Timeliness::Unaware] {
            let name = if t == Timeliness::Aware { "aware" } else { "unaware" };
            let knobs = vec![("depth".to_string(), d.to_string()), ("timeliness".to_string(), name.to_string())];
            let pf = Prefetcher { spec: with_timeliness(&prefetcher.spec, t), weights: prefetcher.weights.clone() };
            jobs.push((knobs, topo.clone(), pf, *config));
        }
    }
    run_all(jobs, trace, seed)
}

/// One row per point: knob columns, then the report columns.
pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if let Some(first) = points.first() {
        let header: Vec<&str> = first.knobs.iter().map(|k| k.0.as_str()).chain(MetricsReport::CSV_HEADER).collect();
        out.write_record(header)?;
    }
    for p in points {
        out.write_record(p.knobs.iter().map(|k| k.1.clone()).chain(p.report.csv_row()))?;
    }
    out.flush()?;
    Ok(())
}
