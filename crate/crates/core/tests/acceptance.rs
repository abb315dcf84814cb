//! One line per acceptance criterion. Pass criterion numbers as arguments
//! to run a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xpand::cache::REFLECTOR_LINES;
use xpand::device::{MediaKind, MediaProfile};
use xpand::engine::{
    run, sweep_effectiveness, sweep_switch_depth, MetricsReport, OracleTemplate, Prefetcher, PrefetcherSpec, SimConfig,
    Timeliness,
};
use xpand::prefetch::model::Batch;
use xpand::prefetch::{compute_issue_cycle, evaluate, train_predictor, AddressModel, ModelDims, TimingHistory, TrainConfig, Weights};
use xpand::protocol::{line_payload, Channel, Message, Opcode, OpcodeRegistry, PAYLOAD_BYTES};
use xpand::topology::{NodeKind, NodeSpec, Topology, TopologySpec};
use xpand::trace::{bundled_workloads, gen_apex, gen_strided, BundledWorkload, LocalityParams, StridedParams, Trace, TraceRecord};
use xpand::{Clock, Latency};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: impl Into<String>) -> Outcome {
    let d = detail.into();
    if ok {
        Ok(d)
    } else {
        Err(d)
    }
}

const MIB: u64 = 1 << 20;
const SEED: u64 = 42;

fn chain(depth: u32, media: MediaProfile) -> Topology {
    Topology::chain(depth, Latency::from_ns(20.0), Latency::from_ns(80.0), media)
}

fn oracle(f: f64, degree: usize, margin_ns: f64, timeliness: Timeliness) -> Prefetcher {
    Prefetcher::new(PrefetcherSpec::Oracle { coverage: f, accuracy: Some(f), degree, margin_ns: Latency::from_ns(margin_ns), timeliness })
}

/// One read per 4 KiB page every `gap` cycles.
fn page_stream(n: u64, gap: u64) -> Trace {
    Trace::new((0..n).map(|i| TraceRecord::read(0x40, i * 4096, i * gap)).collect()).unwrap()
}

fn criterion_1() -> Outcome {
    let gap = |alpha: f64, l: u64, seed: u64| {
        let t = gen_apex(&LocalityParams::new(alpha, l, 64 * MIB, 100_000, seed)).unwrap();
        let topo = Topology::direct(MediaProfile::znand());
        let cxl = run(&t, &topo, &Prefetcher::none(), &SimConfig::default(), SEED).unwrap();
        let local = run(&t, &topo, &Prefetcher::none(), &SimConfig::local_dram(), SEED).unwrap();
        cxl.mean_latency_ns / local.mean_latency_ns - 1.0
    };
    let random = gap(1.0, 4, 1);
    let local = gap(0.01, 64, 2);
    ensure(random >= 5.0 * local, format!("gap {:.0}% at alpha=1 L=4 vs {:.0}% at alpha=0.01 L=64, ratio {:.1}", random * 100.0, local * 100.0, random / local))
}

fn criterion_2() -> Outcome {
    let topo = Topology::direct(MediaProfile::znand());
    let cfg = SimConfig::default();
    let levels: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();

    // back-to-back misses keep the core stalled, so every level shows
    let stalled = page_stream(4000, 400);
    let tmpl = OracleTemplate { degree: 32, margin_ns: Latency::from_ns(3100.0), timeliness: Timeliness::Aware };
    let pts = sweep_effectiveness(&stalled, &topo, &levels, tmpl, &cfg, SEED).map_err(|e| e.to_string())?;
    let speedups: Vec<f64> = pts[..levels.len()].iter().map(|p| p.report.speedup.unwrap()).collect();
    let monotone = speedups.windows(2).all(|w| w[1] >= w[0]);
    ensure(speedups[0] == 1.0 && monotone, format!("speedup not monotone in f: {speedups:?}"))?;

    // period above the round trip: perfect prefetch hides the device
    let periodic = page_stream(4000, 1000);
    let e2e = {
        let mut t = topo.clone();
        t.enumerate();
        let ep = t.endpoints()[0];
        t.attach_doe(ep, cfg.device.internal_hit_ns).unwrap();
        Clock::default().cycles(t.compute_e2e_latency(ep).unwrap())
    };
    let tmpl = OracleTemplate { degree: 16, ..tmpl };
    let pts = sweep_effectiveness(&periodic, &topo, &[0.0, 0.5, 1.0], tmpl, &cfg, SEED).map_err(|e| e.to_string())?;
    let s: Vec<f64> = pts[..3].iter().map(|p| p.report.speedup.unwrap()).collect();
    let (cxl, local) = (pts[2].report.total_cycles, pts[3].report.total_cycles);
    ensure(
        1000 > e2e && s.windows(2).all(|w| w[1] >= w[0]) && cxl < local,
        format!(
            "stall-bound speedup {:.3} to {:.3} over 11 levels; periodic trace (period 1000 > e2e {e2e} cycles) f=1 {cxl} vs local {local} cycles",
            speedups[0],
            speedups[10]
        ),
    )
}

fn criterion_3() -> Outcome {
    let base = Topology::direct(MediaProfile::znand());
    let cfg = SimConfig::default();
    let mut lines = Vec::new();
    for w in bundled_workloads(20_000) {
        let pts = sweep_switch_depth(&w.trace, &base, &[0, 1, 2, 3, 4], &oracle(1.0, 4, 0.0, Timeliness::Aware), &cfg, SEED)
            .map_err(|e| e.to_string())?;
        let unaware: Vec<u64> = pts.iter().filter(|p| p.knobs[1].1 == "unaware").map(|p| p.report.total_cycles).collect();
        if !unaware.windows(2).all(|x| x[1] > x[0]) {
            return Err(format!("{}: unaware cycles not strictly increasing {unaware:?}", w.name));
        }
        lines.push(format!("{} x{:.2}", w.name, unaware[4] as f64 / unaware[0] as f64));
    }

    let gap = 2000;
    let trace = page_stream(2000, gap);
    let mut lates = Vec::new();
    for depth in 0..=4 {
        let topo = chain(depth, MediaProfile::dram());
        let mut t = topo.clone();
        t.enumerate();
        let ep = t.endpoints()[0];
        t.attach_doe(ep, cfg.device.internal_hit_ns).unwrap();
        let e2e = Clock::default().cycles(t.compute_e2e_latency(ep).unwrap());
        let r = run(&trace, &topo, &oracle(1.0, 4, 66.0, Timeliness::Aware), &cfg, SEED).map_err(|e| e.to_string())?;
        if gap <= e2e {
            return Err(format!("period {gap} not above e2e {e2e} at depth {depth}"));
        }
        lates.push(r.prefetch.late);
    }
    ensure(lates.iter().all(|&l| l == 0), format!("unaware slowdown depth 0 to 4: {}; aware late per depth {lates:?}", lines.join(", ")))
}

/// A random tree with every latency drawn to the picosecond.
fn random_topology(rng: &mut ChaCha8Rng) -> TopologySpec {
    let mut nodes = vec![NodeSpec::root(0)];
    let switches = rng.gen_range(0..8u32);
    for id in 1..=switches {
        let parent = rng.gen_range(0..id);
        nodes.push(NodeSpec::switch(id, parent, Latency::from_ps(rng.gen_range(0..300_000)), Latency::from_ps(rng.gen_range(0..100_000))));
    }
    for i in 0..rng.gen_range(1..6u32) {
        let parent = rng.gen_range(0..=switches);
        let mut ep = NodeSpec::endpoint(switches + 1 + i, parent, Latency::from_ps(rng.gen_range(0..100_000)), MediaProfile::znand());
        if rng.gen_bool(0.5) {
            ep.dslbis_ns = Some(Latency::from_ps(rng.gen_range(1..5_000_000)));
        }
        nodes.push(ep);
    }
    TopologySpec { nodes }
}

fn path_walk(spec: &TopologySpec, ep: u32) -> Latency {
    let by_id: BTreeMap<u32, &NodeSpec> = spec.nodes.iter().map(|n| (n.id, n)).collect();
    let mut total = Latency::ZERO;
    let mut cur = by_id[&ep];
    while let Some(p) = cur.parent {
        total += cur.link_latency_ns.unwrap_or(Latency::ZERO) + cur.switch_latency_ns.unwrap_or(Latency::ZERO);
        cur = by_id[&p];
    }
    total
}

fn criterion_4() -> Outcome {
    let declared = Latency::from_ns(37.2);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut endpoints = 0;
    for i in 0..1000 {
        let spec = random_topology(&mut rng);
        let mut t = Topology::from_spec(&spec).map_err(|e| e.to_string())?;
        t.enumerate();
        for n in spec.nodes.iter().filter(|n| n.kind == NodeKind::Endpoint) {
            t.attach_doe(n.id, declared).unwrap();
            let got = t.compute_e2e_latency(n.id).unwrap();
            let want = n.dslbis_ns.unwrap_or(declared) + path_walk(&spec, n.id);
            if got != want {
                return Err(format!("topology {i} endpoint {}: {got:?} vs walk {want:?}", n.id));
            }
            endpoints += 1;
        }
    }
    let mut identities = 0;
    for _ in 0..100_000 {
        let arrival = rng.gen_range(0..1u64 << 40);
        let e2e = rng.gen_range(0..1u64 << 20);
        let now = rng.gen_range(0..1u64 << 40);
        let issue = compute_issue_cycle(arrival, e2e, now);
        if arrival >= e2e && arrival - e2e >= now {
            identities += 1;
            if issue + e2e != arrival {
                return Err(format!("issue {issue} + e2e {e2e} != {arrival}"));
            }
        } else if issue != now {
            return Err(format!("clamped issue {issue} != now {now}"));
        }
    }
    Ok(format!("{endpoints} endpoints on 1000 random topologies match the path walk; {identities} unclamped issue identities hold"))
}

fn criterion_5() -> Outcome {
    let period = 1000u64;
    let mut h = TimingHistory::new();
    for k in 0..200u64 {
        if k >= 11 && h.predict_next_arrival() != Ok(k * period) {
            return Err(format!("periodic prediction off at arrival {k}"));
        }
        h.observe_arrival(k * period);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut h = TimingHistory::new();
    let mut t = 0u64;
    let (mut err, mut n) = (0.0, 0u64);
    for k in 0..10_000u64 {
        if k >= 11 {
            err += (h.predict_next_arrival().unwrap() as f64 - t as f64).abs();
            n += 1;
        }
        h.observe_arrival(t);
        t += (period as f64 * rng.gen_range(0.9..=1.1)).round() as u64;
    }
    let mae = err / n as f64 / period as f64;
    ensure(mae <= 0.10, format!("periodic error 0 after 11 arrivals; jittered MAE {:.2}% of period", mae * 100.0))
}

/// Two loops interleaved at random: pc A walks one line at a time, pc B
/// three, in separate regions.
fn two_pattern(n: u64, seed: u64) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (0u64, 0u64);
    let recs = (0..n)
        .map(|i| {
            if rng.gen_bool(0.5) {
                a += 1;
                TraceRecord::read(0xa0, a * 64, i * 10)
            } else {
                b += 3;
                TraceRecord::read(0xb0, 256 * MIB + b * 64, i * 10)
            }
        })
        .collect();
    Trace::new(recs).unwrap()
}

fn gradient_check() -> Result<f64, String> {
    let dims = ModelDims { seq_len: 4, pc_buckets: 5, vocab: 6, emb_dim: 4, model_dim: 8, attn_dim: 4, ffn_dim: 8, depth: 1 };
    let mut m = AddressModel::new(dims, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in m.params.tensors_mut() {
        t.mapv_inplace(|v| v + rng.gen_range(-0.3..0.3));
    }
    let mut b = Batch::default();
    b.push(&[0, 1, 2, 3], &[1, 2, 0, 5], false);
    b.push(&[4, 4, 1, 0], &[3, 3, 3, 1], true);
    b.push(&[2, 2, 2, 2], &[0, 1, 2, 3], false);
    let y = [2, 5, 0];
    let (_, g, _) = m.loss_and_grad(&b, &y);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for ti in 0..m.params.tensors().len() {
        for j in 0..m.params.tensors()[ti].len() {
            let orig = m.params.tensors()[ti].as_slice().unwrap()[j];
            m.params.tensors_mut()[ti].as_slice_mut().unwrap()[j] = orig + eps;
            let lp = m.loss_and_grad(&b, &y).0;
            m.params.tensors_mut()[ti].as_slice_mut().unwrap()[j] = orig - eps;
            let lm = m.loss_and_grad(&b, &y).0;
            m.params.tensors_mut()[ti].as_slice_mut().unwrap()[j] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let ana = g.tensors()[ti].as_slice().unwrap()[j];
            let denom = num.abs().max(ana.abs());
            if denom > 1e-7 {
                worst = worst.max((num - ana).abs() / denom);
            }
        }
    }
    ensure(worst < 1e-3, format!("gradient relative error {worst:.2e}")).map(|_| worst)
}

fn criterion_6() -> Outcome {
    let cfg = TrainConfig::new(3, 2e-3, SEED);
    let stride = |base: u64| gen_strided(&StridedParams::new(192, 2000, base, 0x400)).unwrap();
    let w = train_predictor(&[stride(0)], &cfg).map_err(|e| e.to_string())?.weights;
    let held_out = evaluate(&w, &stride(512 * MIB)).accuracy();
    ensure(held_out >= 0.95, format!("held-out stride accuracy {held_out:.3}"))?;

    let train = two_pattern(3000, 1);
    let test = two_pattern(2000, 2);
    let with_pc = evaluate(&train_predictor(std::slice::from_ref(&train), &cfg).map_err(|e| e.to_string())?.weights, &test);
    let ablated = evaluate(&train_predictor(&[train], &TrainConfig { use_pc: false, ..cfg }).map_err(|e| e.to_string())?.weights, &test);
    let per = |e: &xpand::prefetch::train::Evaluation| [e.pc_accuracy(0xa0).unwrap_or(0.0), e.pc_accuracy(0xb0).unwrap_or(0.0)];
    let (on, off) = (per(&with_pc), per(&ablated));
    ensure(
        on.iter().all(|&a| a >= 0.80) && ablated.accuracy() < with_pc.accuracy() - 0.10,
        format!(
            "mixed per-pattern accuracy {:.3}/{:.3} with pc, {:.3}/{:.3} ablated (overall {:.3} vs {:.3})",
            on[0],
            on[1],
            off[0],
            off[1],
            with_pc.accuracy(),
            ablated.accuracy()
        ),
    )?;
    let worst = gradient_check()?;
    Ok(format!(
        "held-out stride {held_out:.3}; mixed per-pattern {:.3}/{:.3} with pc, overall {:.3} ablated vs {:.3}; gradient rel err {worst:.1e}",
        on[0],
        on[1],
        ablated.accuracy(),
        with_pc.accuracy()
    ))
}

fn criterion_7() -> Outcome {
    let golden = [
        ("mem_rd", Message::mem_rd(0x1000, 7)),
        ("mem_rd_prefetch", Message::mem_rd(0x2040, 9).with_prefetch(true)),
        ("mem_rd_pc", Message::mem_rd_pc(0x40, 0x401234, 0xdead_beef)),
        ("mem_wr", Message::mem_wr(0x80, line_payload(0x80), 3)),
        ("bi_rsp", Message::bi_rsp(0xc0, 0x8000_0001)),
        ("bisnp_inv", Message::bisnp_inv(0x100, 2)),
        ("bisnp_data", Message::bisnp_data(0x140, 0x8000_0002)),
        ("mem_data", Message::mem_data(0x180, line_payload(0x180), 5)),
        ("mem_data_prefetch", Message::mem_data(0x140, line_payload(0x140), 0x8000_0002).with_prefetch(true)),
        ("cmp", Message::cmp(0x1c0, 6)),
    ];
    for (name, msg) in &golden {
        let path = format!("{}/tests/golden/{name}.bin", env!("CARGO_MANIFEST_DIR"));
        let bytes = std::fs::read(&path).map_err(|e| format!("{path}: {e}"))?;
        if msg.encode().map_err(|e| e.to_string())? != bytes || Message::decode(&bytes).as_ref() != Ok(msg) {
            return Err(format!("golden file {name} differs"));
        }
    }

    let mut count = 0;
    for op in Opcode::ALL {
        for tag in [0u32, 1, 0x7fff_ffff, 0x8000_0000, u32::MAX] {
            for addr in [0u64, 64, 1 << 40, !63] {
                for prefetch in [false, true] {
                    let base = Message { opcode: op, tag, addr, pc: None, payload: None, prefetch };
                    let variants: Vec<Message> = match op {
                        Opcode::MemRdPC => [0, 1, u64::MAX].iter().map(|&pc| Message { pc: Some(pc), ..base }).collect(),
                        Opcode::MemWr | Opcode::MemData => [[0u8; PAYLOAD_BYTES], [0xff; PAYLOAD_BYTES], line_payload(addr)]
                            .iter()
                            .map(|&p| Message { payload: Some(p), ..base })
                            .collect(),
                        _ => vec![base],
                    };
                    for m in variants {
                        let bytes = m.encode().map_err(|e| format!("{m:?}: {e}"))?;
                        if Message::decode(&bytes).as_ref() != Ok(&m) {
                            return Err(format!("round trip failed for {m:?}"));
                        }
                        count += 1;
                    }
                }
            }
        }
    }

    let mut r = OpcodeRegistry::new();
    let rwd_ok = (1..=12).all(|i| r.register(Channel::RwD, &format!("rwd-{i}")).is_ok());
    let rwd_14th = r.register(Channel::RwD, "rwd-13").is_err();
    let snp_ok = (1..=9).all(|i| r.register(Channel::BISnp, &format!("snp-{i}")).is_ok());
    let snp_11th = r.register(Channel::BISnp, "snp-10").is_err();
    ensure(
        rwd_ok && rwd_14th && snp_ok && snp_11th,
        format!("{} golden files byte-exact; {count} messages round trip; 14th RwD and 11th BISnp custom opcodes rejected", golden.len()),
    )
}

/// Expand weights per workload, trained once on its first 2000 records.
fn expand_weights(workloads: &[BundledWorkload]) -> &'static Vec<Arc<Weights>> {
    static W: OnceLock<Vec<Arc<Weights>>> = OnceLock::new();
    W.get_or_init(|| {
        workloads
            .iter()
            .map(|w| Arc::new(train_predictor(&[w.trace.truncated(2000)], &TrainConfig::new(3, 2e-3, SEED)).unwrap().weights))
            .collect()
    })
}

fn workloads() -> &'static Vec<BundledWorkload> {
    static W: OnceLock<Vec<BundledWorkload>> = OnceLock::new();
    W.get_or_init(|| bundled_workloads(10_000))
}

fn prefetchers(weights: &Arc<Weights>) -> Vec<Prefetcher> {
    vec![
        Prefetcher::none(),
        Prefetcher::new(PrefetcherSpec::Spatial { degree: 4 }),
        Prefetcher::new(PrefetcherSpec::Temporal { degree: 4, entries: 4096 }),
        oracle(0.8, 4, 0.0, Timeliness::Aware),
        Prefetcher::with_weights(
            PrefetcherSpec::Expand { weights: None, degree: 4, margin_ns: Latency::ZERO, timeliness: Timeliness::Aware, online: true },
            weights.clone(),
        ),
    ]
}

fn criterion_8() -> Outcome {
    let ws = workloads();
    let weights = expand_weights(ws);
    let topo = chain(1, MediaProfile::znand());
    let cfg = SimConfig::default();
    let mut runs = 0;
    let mut peak = 0;
    for (w, wt) in ws.iter().zip(weights) {
        for pf in prefetchers(wt) {
            let a: MetricsReport = run(&w.trace, &topo, &pf, &cfg, SEED).map_err(|e| e.to_string())?;
            let b = run(&w.trace, &topo, &pf, &cfg, SEED).map_err(|e| e.to_string())?;
            let tag = format!("{} / {}", w.name, pf.id());
            if a.hits.total() != w.trace.len() as u64 {
                return Err(format!("{tag}: {} counted for {} records", a.hits.total(), w.trace.len()));
            }
            if a.to_json() != b.to_json() {
                return Err(format!("{tag}: reports differ between identical runs"));
            }
            if a.max_reflector_occupancy > REFLECTOR_LINES {
                return Err(format!("{tag}: reflector held {} lines", a.max_reflector_occupancy));
            }
            peak = peak.max(a.max_reflector_occupancy);
            runs += 1;
        }
    }
    Ok(format!("{runs} workload/prefetcher pairs conserve accesses and repeat byte for byte; peak reflector occupancy {peak}/{REFLECTOR_LINES}"))
}

fn criterion_9() -> Outcome {
    let ws = workloads();
    let weights = expand_weights(ws);
    let cfg = SimConfig::default();
    let mut pairs = 0;
    let mut worst_zp: f64 = f64::INFINITY;
    for (w, wt) in ws.iter().zip(weights) {
        for pf in prefetchers(wt) {
            let cycles: Vec<u64> = MediaKind::ALL
                .iter()
                .map(|&k| run(&w.trace, &chain(1, MediaProfile::of(k)), &pf, &cfg, SEED).map(|r| r.total_cycles))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            if !(cycles[0] <= cycles[1] && cycles[1] <= cycles[2]) {
                return Err(format!("{} / {}: dram {} pmem {} znand {}", w.name, pf.id(), cycles[0], cycles[1], cycles[2]));
            }
            worst_zp = worst_zp.min(cycles[2] as f64 / cycles[1] as f64);
            pairs += 1;
        }
    }
    Ok(format!("dram <= pmem <= znand on {pairs} workload/prefetcher pairs; smallest znand/pmem ratio {worst_zp:.2}"))
}

fn main() {
    let criteria: [fn() -> Outcome; 9] =
        [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8, criterion_9];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, check) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n}: PASS {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n}: FAIL {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
