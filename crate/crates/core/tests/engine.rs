use xpand::cache::CacheLevelConfig;
use xpand::device::MediaProfile;
use xpand::engine::{
    run, sweep_effectiveness, sweep_switch_depth, write_sweep_csv, MetricsReport, OracleTemplate, Prefetcher, PrefetcherSpec,
    SimConfig, Timeliness,
};
use xpand::topology::Topology;
use xpand::trace::{Trace, TraceRecord};
use xpand::{Clock, Latency};

const LINK_NS: f64 = 20.0;
const SWITCH_NS: f64 = 80.0;
const LLC_CYCLES: u64 = 40;

fn chain(depth: u32, media: MediaProfile) -> Topology {
    Topology::chain(depth, Latency::from_ns(LINK_NS), Latency::from_ns(SWITCH_NS), media)
}

fn cyc(ns: f64) -> u64 {
    Clock::default().cycles(Latency::from_ns(ns))
}

/// One read per page, with the gaps between issues cycling through `gaps`.
fn paced(n: usize, gaps: &[u64]) -> Trace {
    let mut t = 0;
    let recs = (0..n)
        .map(|i| {
            let r = TraceRecord::read(0x40, i as u64 * 4096, t);
            t += gaps[i % gaps.len()];
            r
        })
        .collect();
    Trace::new(recs).unwrap()
}

fn oracle(degree: usize, margin_ns: f64, timeliness: Timeliness) -> Prefetcher {
    Prefetcher::new(PrefetcherSpec::Oracle { coverage: 1.0, accuracy: Some(1.0), degree, margin_ns: Latency::from_ns(margin_ns), timeliness })
}

/// Late prefetches of a degree-1 perfect oracle that believes the device
/// sits right behind its own link, replayed record by record.
///
/// Each demand reaches the device `LLC + path` after issue. From the second
/// arrival on, the device plans the next record at the mean of the last
/// ten intervals, less its believed downstream link, round trip and margin.
/// The pushed line lands after an internal miss, the media read and the
/// upstream path, and is late when that is after the next demand's probe.
fn unaware_late_oracle(trace: &Trace, depth: u32, margin_ns: f64) -> u64 {
    let path = cyc(LINK_NS + depth as f64 * (LINK_NS + SWITCH_NS));
    let link = cyc(LINK_NS);
    let dslbis = cyc(37.2);
    let media = cyc(66.0);
    let margin = cyc(margin_ns);
    let p: Vec<u64> = trace.records().iter().map(|r| r.cpu_cycle).collect();
    let mut late = 0;
    for k in 1..p.len() - 1 {
        let lo = k.saturating_sub(10);
        let n = (k - lo) as u64;
        let mean = ((p[k] - p[lo]) + n / 2) / n;
        let arrival = p[k] + LLC_CYCLES + path;
        let issue = (arrival + mean).saturating_sub(link + dslbis + link + margin).max(arrival);
        let landed = issue + dslbis + media + path;
        late += (landed > p[k + 1] + LLC_CYCLES) as u64;
    }
    late
}

#[test]
fn unaware_late_prefetches_grow_with_depth() {
    let gaps: Vec<u64> = (0..10).map(|i| 4000 + 500 * i).collect();
    let trace = paced(400, &gaps);
    let mut lates = Vec::new();
    for depth in 0..=4 {
        let r = run(&trace, &chain(depth, MediaProfile::dram()), &oracle(1, 700.0, Timeliness::Unaware), &SimConfig::default(), 1).unwrap();
        let expected = unaware_late_oracle(&trace, depth, 700.0);
        assert_eq!(r.prefetch.late, expected, "depth {depth}");
        assert_eq!(r.prefetch.used + r.prefetch.late, 398, "depth {depth}");
        lates.push(expected);
    }
    assert!(lates.windows(2).all(|w| w[0] < w[1]), "{lates:?}");
}

fn without_config(mut r: MetricsReport) -> MetricsReport {
    r.config = without_config_marker();
    r.config_hash.clear();
    r.prefetcher.clear();
    r
}

fn without_config_marker() -> xpand::engine::ResolvedRun {
    let r = run(&Trace::empty(), &chain(0, MediaProfile::dram()), &Prefetcher::none(), &SimConfig::default(), 0).unwrap();
    r.config
}

#[test]
fn beliefs_agree_without_switches() {
    let trace = paced(300, &[2000, 6000, 3000]);
    let topo = chain(0, MediaProfile::znand());
    let a = run(&trace, &topo, &oracle(4, 100.0, Timeliness::Aware), &SimConfig::default(), 3).unwrap();
    let u = run(&trace, &topo, &oracle(4, 100.0, Timeliness::Unaware), &SimConfig::default(), 3).unwrap();
    assert_ne!(a.config_hash, u.config_hash);
    assert_eq!(without_config(a), without_config(u));
}

#[test]
fn aware_oracle_is_never_late() {
    let trace = paced(500, &[2000]);
    for depth in 0..=4 {
        let r = run(&trace, &chain(depth, MediaProfile::dram()), &oracle(4, 66.0, Timeliness::Aware), &SimConfig::default(), 5).unwrap();
        assert_eq!(r.prefetch.late, 0, "depth {depth}");
        // the first two records come before any interval is known; the
        // third is skipped once its issue cycle is already past
        let path = cyc(LINK_NS + depth as f64 * (LINK_NS + SWITCH_NS));
        let skipped = (2 * path + cyc(37.2) + cyc(66.0) > 2000) as u64;
        assert_eq!(r.hits.reflector, 498 - skipped, "depth {depth}");
    }
}

#[test]
fn no_prefetch_against_itself() {
    let trace = paced(200, &[700]);
    let topo = chain(1, MediaProfile::pmem());
    let a = run(&trace, &topo, &Prefetcher::none(), &SimConfig::default(), 0).unwrap();
    let b = run(&trace, &topo, &Prefetcher::none(), &SimConfig::default(), 9).unwrap();
    assert_eq!(b.with_speedup("none", &a).speedup, Some(1.0));
}

#[test]
fn internal_hit_round_trip() {
    let line = |i: u64| i * 4096;
    let recs = vec![
        TraceRecord::read(1, line(0), 0),
        TraceRecord::read(1, line(1), 20_000),
        TraceRecord::read(1, line(2), 40_000),
        TraceRecord::read(1, line(0), 60_000),
    ];
    let trace = Trace::new(recs).unwrap();
    let mut cfg = SimConfig::default();
    cfg.cache.l1 = CacheLevelConfig::new(128, 2, 5);
    cfg.cache.l2 = CacheLevelConfig::new(128, 2, 20);
    cfg.cache.llc = CacheLevelConfig::new(128, 2, LLC_CYCLES);
    for depth in 0..=3 {
        let r = run(&trace, &chain(depth, MediaProfile::znand()), &Prefetcher::none(), &cfg, 0).unwrap();
        let path = cyc(LINK_NS + depth as f64 * (LINK_NS + SWITCH_NS));
        assert_eq!(r.devices[0].internal_hits, 1, "depth {depth}");
        assert_eq!(r.total_cycles, 60_000 + LLC_CYCLES + path + cyc(37.2) + path, "depth {depth}");
    }
}

#[test]
fn sweep_outputs_one_row_per_point() {
    let trace = paced(200, &[1000]);
    let topo = chain(0, MediaProfile::znand());
    let pts = sweep_effectiveness(&trace, &topo, &[0.0, 0.5, 1.0], OracleTemplate::default(), &SimConfig::default(), 2).unwrap();
    let mut buf = Vec::new();
    write_sweep_csv(&pts, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 + 1);
    assert!(text.lines().last().unwrap().starts_with("local,"));
    assert!(pts.iter().all(|p| p.report.baseline.as_deref() == Some("none")));

    let pts = sweep_switch_depth(&trace, &topo, &[0, 1, 2, 3, 4], &oracle(4, 0.0, Timeliness::Aware), &SimConfig::default(), 2).unwrap();
    assert_eq!(pts.len(), 10);
    let mut buf = Vec::new();
    write_sweep_csv(&pts, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 11);
    assert_eq!(pts[3].knobs, vec![("depth".to_string(), "1".to_string()), ("timeliness".to_string(), "unaware".to_string())]);
}

#[test]
fn bad_levels_rejected() {
    let err = sweep_effectiveness(&Trace::empty(), &chain(0, MediaProfile::dram()), &[0.5, 1.5, -0.1], OracleTemplate::default(), &SimConfig::default(), 0).unwrap_err();
    assert_eq!(err.to_string().matches("outside [0, 1]").count(), 2);
}
