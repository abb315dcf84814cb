use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use super::address::{AddressMap, Home};
use super::config::{MemoryMode, PrefetcherSpec, SimConfig, Timeliness};
use super::event::{EventQueue, Ranked};
use super::metrics::{ratio, LevelCounts, MetricsReport, PrefetchCounts, ResolvedRun, TraceFingerprint};
use crate::cache::{notify_hit, Delivery, HostCaches, Level};
use crate::device::{Device, DeviceError, Ingest, PrefetchIssue, ReadDone, ReadKind};
use crate::prefetch::{
    AddressPredictor, AddressSource, BestOffset, Belief, Decider, Observation, ObservationKind, OnlineConfig,
    OracleSource, Plan, TemporalTable, WindowEntry, Weights, WeightsError,
};
use crate::protocol::{line_payload, Direction, IoNotification, Message, Opcode, ProtocolError};
use crate::topology::{NodeId, Topology, TopologyError};
use crate::trace::{CoreId, Op, Trace, LINE_BYTES};
use crate::units::{Clock, Latency};

const PUSH_TAG: u32 = 0x8000_0000;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

/// A prefetcher description with its loaded model, if it needs one.
#[derive(Clone, Debug, PartialEq)]
pub struct Prefetcher {
    pub spec: PrefetcherSpec,
    pub weights: Option<Arc<Weights>>,
}

impl Prefetcher {
    pub fn none() -> Self {
        Prefetcher { spec: PrefetcherSpec::None, weights: None }
    }

    pub fn new(spec: PrefetcherSpec) -> Self {
        Prefetcher { spec, weights: None }
    }

    pub fn with_weights(spec: PrefetcherSpec, weights: Arc<Weights>) -> Self {
        Prefetcher { spec, weights: Some(weights) }
    }

    /// Loads the weights file named by an `expand` spec.
    pub fn load(spec: PrefetcherSpec) -> Result<Self, EngineError> {
        let weights = match &spec {
            PrefetcherSpec::Expand { weights: Some(path), .. } => Some(Arc::new(Weights::load(path)?)),
            _ => None,
        };
        Ok(Prefetcher { spec, weights })
    }

    pub fn id(&self) -> &'static str {
        self.spec.id()
    }
}

#[derive(Debug)]
enum Ev {
    MsgArrive { dir: Direction, ep: usize, msg: Message },
    MediaDone { ep: usize, done: ReadDone },
    LocalDone { line: u64 },
    IoNotify { ep: usize, note: IoNotification, record: u64 },
    PrefetchTimer { ep: usize, line: u64, local: u64 },
    Complete { core: CoreId, issued: u64 },
    DeviceDispatch { ep: usize },
    LlcProbe { line: u64 },
    CpuIssue { core: CoreId },
}

impl Ranked for Ev {
    fn rank(&self) -> u8 {
        match self {
            Ev::MsgArrive { .. } => 0,
            Ev::MediaDone { .. } | Ev::LocalDone { .. } => 1,
            Ev::IoNotify { .. } => 2,
            Ev::PrefetchTimer { .. } => 3,
            Ev::Complete { .. } => 4,
            Ev::DeviceDispatch { .. } => 5,
            Ev::LlcProbe { .. } => 6,
            Ev::CpuIssue { .. } => 7,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Waiter {
    core: CoreId,
    issued: u64,
}

#[derive(Debug)]
struct Mshr {
    waiters: Vec<Waiter>,
    write: bool,
    pc: u64,
    record: u64,
    /// Set once the reflector has been probed and the demand sent on.
    probed: bool,
}

#[derive(Debug, Default)]
struct Pending {
    count: u32,
    late: bool,
}

#[derive(Debug, Default)]
struct CoreState {
    records: Vec<usize>,
    next: usize,
    delay: u64,
    outstanding: usize,
    blocked_at: Option<u64>,
}

struct Endpoint {
    node: NodeId,
    device: Device,
    decider: Option<Decider>,
}

enum HostPrefetcher {
    None,
    Spatial(BestOffset),
    Temporal(TemporalTable),
}

impl HostPrefetcher {
    fn observe(&mut self, line: u64) -> Vec<u64> {
        match self {
            HostPrefetcher::None => Vec::new(),
            HostPrefetcher::Spatial(b) => b.observe(line),
            HostPrefetcher::Temporal(t) => t.observe(line),
        }
    }
}

#[derive(Default)]
struct Counters {
    hits: LevelCounts,
    pf: PrefetchCounts,
    stall: u64,
    latency_sum: u64,
    end: u64,
    notifications: u64,
    writebacks: u64,
}

/// One simulation over owned state.
pub struct Simulation<'a> {
    trace: &'a Trace,
    cfg: SimConfig,
    prefetcher: Prefetcher,
    topology: Topology,
    seed: u64,
    caches: HostCaches,
    fabric: crate::protocol::Fabric,
    map: AddressMap,
    eps: Vec<Endpoint>,
    host_pf: HostPrefetcher,
    device_side: bool,
    local_cycles: u64,
    queue: EventQueue<Ev>,
    cores: Vec<CoreState>,
    mshr: HashMap<u64, Mshr>,
    demand_tags: HashMap<u32, u64>,
    host_pf_tags: HashMap<(usize, u64), u32>,
    host_pf_out: HashMap<u32, u64>,
    announced: HashMap<u32, u64>,
    pending: HashMap<u64, Pending>,
    next_tag: u32,
    next_push: u32,
    wb: Vec<u64>,
    c: Counters,
}

fn belief(topology: &Topology, ep: NodeId, clock: Clock, cfg: &SimConfig, margin: Latency, mode: Timeliness) -> Result<Belief, EngineError> {
    let dslbis = clock.cycles(topology.read_dslbis(ep)?);
    let down = match mode {
        Timeliness::Aware => clock.cycles(topology.path_latency(ep)?),
        Timeliness::Unaware => clock.cycles(topology.link_latency(ep).ok_or(TopologyError::UnknownEndpoint(ep))?),
    };
    Ok(Belief {
        e2e_cycles: dslbis + down,
        down_cycles: down,
        io_overhead_cycles: clock.cycles(cfg.fabric.io_overhead_ns),
        margin_cycles: clock.cycles(margin),
    })
}

/// Oracle future for endpoint `ep`: its demand lines at every change, plus
/// a granule of lines past the trace footprint to draw useless prefetches from.
fn oracle_stream(trace: &Trace, map: &AddressMap, ep: usize, granule: u64, capacity: u64) -> (Vec<(u64, u64)>, (u64, u64)) {
    let mut future = Vec::new();
    let mut max_local = None;
    for (i, r) in trace.records().iter().enumerate() {
        if let Home::Cxl { endpoint, local } = map.home(r.line()) {
            if endpoint == ep {
                if future.last().map(|&(_, l)| l) != Some(r.line()) {
                    future.push((i as u64, r.line()));
                }
                max_local = max_local.max(Some(local));
            }
        }
    }
    let start = max_local.map_or(0, |m| (m / granule + 1) * granule);
    let junk = match map.host_addr(ep, start) {
        Some(host) if start.saturating_add(granule) <= capacity => (host, host + granule),
        _ => (0, 0),
    };
    (future, junk)
}

impl<'a> Simulation<'a> {
    pub fn new(trace: &'a Trace, topology: &Topology, prefetcher: &Prefetcher, cfg: &SimConfig, seed: u64) -> Result<Self, EngineError> {
        let spec = &prefetcher.spec;
        let mut errs = cfg.validate();
        errs.extend(spec.validate().into_iter().filter(|e| !(e.starts_with("prefetcher.weights") && prefetcher.weights.is_some())));
        if cfg.memory.mode == MemoryMode::LocalDram && *spec != PrefetcherSpec::None {
            errs.push("prefetcher: memory.mode `local_dram` has no CXL device to prefetch from".into());
        }
        if matches!(spec, PrefetcherSpec::Expand { .. }) && prefetcher.weights.is_none() {
            errs.push("prefetcher.weights: not loaded".into());
        }
        let mut topo = topology.clone();
        topo.enumerate();
        let nodes = topo.endpoints();
        if cfg.memory.mode == MemoryMode::Cxl && nodes.is_empty() {
            errs.push("topology: no endpoints to map CXL memory onto".into());
        }
        if !errs.is_empty() {
            return Err(EngineError::Config(errs));
        }

        let clock = Clock::new(cfg.cpu.freq_mhz);
        let map = AddressMap::new(&cfg.memory, nodes.len());
        let device_side = spec.is_device_side();
        let mut eps = Vec::with_capacity(nodes.len());
        for (i, &node) in nodes.iter().enumerate() {
            let device = Device::new(cfg.device, topo.media(node)?, clock).map_err(|e| EngineError::Config(vec![format!("device: {e}")]))?;
            topo.attach_doe(node, device.declared_latency())?;
            let decider = if device_side {
                topo.compute_e2e_latency(node)?;
                Some(match spec {
                    PrefetcherSpec::Expand { degree, margin_ns, timeliness, online, .. } => {
                        let weights = prefetcher.weights.as_deref().expect("checked above").clone();
                        let oc = if *online { OnlineConfig { seed, ..OnlineConfig::default() } } else { OnlineConfig { interval: 0, ..OnlineConfig::default() } };
                        let source = AddressSource::Model(Box::new(AddressPredictor::from_weights(weights, oc)));
                        Decider::new(source, belief(&topo, node, clock, cfg, *margin_ns, *timeliness)?, *degree)
                    }
                    PrefetcherSpec::Oracle { coverage, accuracy, degree, margin_ns, timeliness } => {
                        let (future, junk) = oracle_stream(trace, &map, i, cfg.memory.interleave_bytes, cfg.device.capacity_bytes);
                        let source = OracleSource::new(future, *coverage, accuracy.unwrap_or(*coverage), seed ^ ((i as u64) << 32), junk);
                        Decider::new(AddressSource::Oracle(source), belief(&topo, node, clock, cfg, *margin_ns, *timeliness)?, *degree)
                    }
                    _ => unreachable!("device-side prefetchers only"),
                })
            } else {
                None
            };
            eps.push(Endpoint { node, device, decider });
        }
        let host_pf = match spec {
            PrefetcherSpec::Spatial { degree } => HostPrefetcher::Spatial(BestOffset::new(*degree)),
            PrefetcherSpec::Temporal { degree, entries } => HostPrefetcher::Temporal(TemporalTable::new(*degree, *entries)),
            _ => HostPrefetcher::None,
        };

        let n_cores = trace.cores().iter().copied().max().map_or(1, |c| c as usize + 1);
        let mut cores: Vec<CoreState> = (0..n_cores).map(|_| CoreState::default()).collect();
        for (i, &c) in trace.cores().iter().enumerate() {
            cores[c as usize].records.push(i);
        }
        let mut queue = EventQueue::new();
        for (c, core) in cores.iter().enumerate() {
            if let Some(&first) = core.records.first() {
                queue.push(trace.records()[first].cpu_cycle, Ev::CpuIssue { core: c as CoreId });
            }
        }

        Ok(Simulation {
            trace,
            cfg: *cfg,
            prefetcher: prefetcher.clone(),
            fabric: crate::protocol::Fabric::new(&topo, clock, cfg.fabric.io_overhead_ns)?,
            topology: topo,
            seed,
            caches: HostCaches::new(cfg.cache, n_cores).map_err(|e| EngineError::Config(vec![format!("cache: {e}")]))?,
            map,
            eps,
            host_pf,
            device_side,
            local_cycles: clock.cycles(cfg.memory.local_latency_ns),
            queue,
            cores,
            mshr: HashMap::new(),
            demand_tags: HashMap::new(),
            host_pf_tags: HashMap::new(),
            host_pf_out: HashMap::new(),
            announced: HashMap::new(),
            pending: HashMap::new(),
            next_tag: 0,
            next_push: 0,
            wb: Vec::new(),
            c: Counters::default(),
        })
    }

    /// The enumerated topology with every config-space field filled in.
    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    fn tag(&mut self) -> u32 {
        let t = self.next_tag;
        self.next_tag = (self.next_tag + 1) & !PUSH_TAG;
        t
    }

    fn push_tag(&mut self) -> u32 {
        let t = self.next_push | PUSH_TAG;
        self.next_push = (self.next_push + 1) & !PUSH_TAG;
        t
    }

    fn send(&mut self, dir: Direction, ep: usize, msg: Message, now: u64) -> Result<(), EngineError> {
        let at = self.fabric.deliver(&msg, self.eps[ep].node, now)?;
        self.queue.push(at, Ev::MsgArrive { dir, ep, msg });
        Ok(())
    }

    pub fn run(mut self) -> Result<MetricsReport, EngineError> {
        while let Some((now, ev)) = self.queue.pop() {
            self.handle(now, ev)?;
        }
        Ok(self.report())
    }

    fn handle(&mut self, now: u64, ev: Ev) -> Result<(), EngineError> {
        match ev {
            Ev::CpuIssue { core } => self.issue(core, now)?,
            Ev::Complete { core, issued } => self.complete(core, issued, now),
            Ev::LlcProbe { line } => self.probe(line, now)?,
            Ev::LocalDone { line } => self.miss_done(line, now)?,
            Ev::DeviceDispatch { ep } => {
                let (done, next) = self.eps[ep].device.dispatch(now);
                if let Some(d) = done {
                    self.queue.push(d.completion, Ev::MediaDone { ep, done: d });
                }
                if let Some(n) = next {
                    self.queue.push(n, Ev::DeviceDispatch { ep });
                }
            }
            Ev::MediaDone { ep, done } => self.media_done(ep, done, now)?,
            Ev::PrefetchTimer { ep, line, local } => {
                if self.pending.get(&line).is_some_and(|p| p.late) {
                    self.unpend(line);
                } else {
                    self.device_prefetch(ep, line, local, now)?;
                }
            }
            Ev::IoNotify { ep, note, record } => {
                let entry = WindowEntry { pc: note.pc, line: note.addr, arrival_cycle: now, is_read: true };
                self.observe(ep, Observation { entry, record, kind: ObservationKind::Notification }, now)?;
            }
            Ev::MsgArrive { dir: Direction::Down, ep, msg } => self.at_device(ep, msg, now)?,
            Ev::MsgArrive { dir: Direction::Up, ep, msg } => self.at_host(ep, msg, now)?,
        }
        Ok(())
    }

    fn issue(&mut self, core: CoreId, now: u64) -> Result<(), EngineError> {
        let max = self.cfg.cpu.max_outstanding;
        loop {
            let st = &self.cores[core as usize];
            let Some(&idx) = st.records.get(st.next) else { return Ok(()) };
            let ready = self.trace.records()[idx].cpu_cycle + st.delay;
            if ready > now {
                self.queue.push(ready, Ev::CpuIssue { core });
                return Ok(());
            }
            if st.outstanding >= max {
                self.cores[core as usize].blocked_at = Some(now);
                return Ok(());
            }
            self.cores[core as usize].next += 1;
            self.access(core, idx, now)?;
        }
    }

    fn access(&mut self, core: CoreId, idx: usize, now: u64) -> Result<(), EngineError> {
        let rec = self.trace.records()[idx];
        let line = rec.line();
        let write = rec.op == Op::Write;
        let lat = self.cfg.cache;
        let level = self.caches.lookup(core, line, write, &mut self.wb);
        self.writebacks(now)?;
        match level {
            Some(Level::L1) => {
                self.c.hits.l1 += 1;
                self.c.latency_sum += lat.l1.hit_latency_cycles;
                self.c.end = self.c.end.max(now + lat.l1.hit_latency_cycles);
                return Ok(());
            }
            Some(Level::L2) => {
                self.c.hits.l2 += 1;
                self.queue.push(now + lat.l2.hit_latency_cycles, Ev::Complete { core, issued: now });
            }
            Some(_) => {
                self.c.hits.llc += 1;
                let at = now + lat.llc.hit_latency_cycles;
                self.queue.push(at, Ev::Complete { core, issued: now });
                self.notify(line, rec.pc, idx as u64, at)?;
            }
            None => {
                if let Some(m) = self.mshr.get_mut(&line) {
                    m.waiters.push(Waiter { core, issued: now });
                    m.write |= write;
                    self.c.hits.miss += 1;
                    self.c.hits.merged += 1;
                } else {
                    self.mshr.insert(line, Mshr { waiters: vec![Waiter { core, issued: now }], write, pc: rec.pc, record: idx as u64, probed: false });
                    self.queue.push(now + lat.llc.hit_latency_cycles, Ev::LlcProbe { line });
                }
            }
        }
        self.cores[core as usize].outstanding += 1;
        Ok(())
    }

    fn complete(&mut self, core: CoreId, issued: u64, now: u64) {
        self.c.latency_sum += now - issued;
        self.c.end = self.c.end.max(now);
        let st = &mut self.cores[core as usize];
        st.outstanding -= 1;
        if let Some(b) = st.blocked_at.take() {
            self.c.stall += now - b;
            st.delay += now - b;
            self.queue.push(now, Ev::CpuIssue { core });
        }
    }

    /// Reports a host hit on a CXL line to its device over CXL.io.
    fn notify(&mut self, line: u64, pc: u64, record: u64, at: u64) -> Result<(), EngineError> {
        if !self.device_side {
            return Ok(());
        }
        if let Home::Cxl { endpoint, .. } = self.map.home(line) {
            let arrive = self.fabric.deliver_io(self.eps[endpoint].node, at)?;
            self.c.notifications += 1;
            self.queue.push(arrive, Ev::IoNotify { ep: endpoint, note: notify_hit(line, pc, at), record });
        }
        Ok(())
    }

    fn writebacks(&mut self, now: u64) -> Result<(), EngineError> {
        let wb = std::mem::take(&mut self.wb);
        for &line in &wb {
            self.c.writebacks += 1;
            if let Home::Cxl { endpoint, .. } = self.map.home(line) {
                let tag = self.tag();
                self.send(Direction::Down, endpoint, Message::mem_wr(line, line_payload(line), tag), now)?;
            }
        }
        self.wb = wb;
        self.wb.clear();
        Ok(())
    }

    fn pend(&mut self, line: u64) {
        self.pending.entry(line).or_default().count += 1;
    }

    fn unpend(&mut self, line: u64) {
        if let Some(p) = self.pending.get_mut(&line) {
            p.count -= 1;
            if p.count == 0 {
                self.pending.remove(&line);
            }
        }
    }

    fn probe(&mut self, line: u64, now: u64) -> Result<(), EngineError> {
        let m = self.mshr.get_mut(&line).expect("probed line has an entry");
        m.probed = true;
        let (core, write, pc, record) = (m.waiters[0].core, m.write, m.pc, m.record);
        let home = self.map.home(line);
        let candidates = self.host_pf.observe(line);
        if self.caches.take_prefetched(core, line, write, &mut self.wb).is_some() {
            let m = self.mshr.remove(&line).expect("probed line has an entry");
            self.c.hits.reflector += 1;
            self.c.pf.used += 1;
            self.writebacks(now)?;
            for w in m.waiters {
                self.queue.push(now + 1, Ev::Complete { core: w.core, issued: w.issued });
            }
            self.notify(line, pc, record, now)?;
        } else {
            self.c.hits.miss += 1;
            match home {
                Home::Local => self.queue.push(now + self.local_cycles, Ev::LocalDone { line }),
                Home::Cxl { endpoint, .. } => {
                    if let Some(p) = self.pending.get_mut(&line) {
                        if !p.late {
                            p.late = true;
                            self.c.pf.late += 1;
                        }
                    }
                    let tag = self.tag();
                    self.demand_tags.insert(tag, line);
                    self.send(Direction::Down, endpoint, Message::mem_rd_pc(line, pc, tag), now)?;
                }
            }
        }
        for cand in candidates {
            self.host_prefetch(cand, now)?;
        }
        Ok(())
    }

    fn host_prefetch(&mut self, line: u64, now: u64) -> Result<(), EngineError> {
        let Home::Cxl { endpoint, .. } = self.map.home(line) else { return Ok(()) };
        if self.caches.llc_contains(line)
            || self.caches.reflector().contains(line)
            || self.mshr.contains_key(&line)
            || self.pending.contains_key(&line)
        {
            return Ok(());
        }
        self.pend(line);
        let tag = self.tag();
        self.host_pf_out.insert(tag, line);
        self.send(Direction::Down, endpoint, Message::mem_rd(line, tag).with_prefetch(true), now)
    }

    fn miss_done(&mut self, line: u64, now: u64) -> Result<(), EngineError> {
        let m = self.mshr.remove(&line).expect("completed line has an entry");
        self.caches.fill(m.waiters[0].core, line, m.write, &mut self.wb);
        self.writebacks(now)?;
        for w in m.waiters {
            self.complete(w.core, w.issued, now);
        }
        Ok(())
    }

    fn observe(&mut self, ep: usize, obs: Observation, now: u64) -> Result<(), EngineError> {
        let Some(d) = self.eps[ep].decider.as_mut() else { return Ok(()) };
        let plans = d.observe(obs, now);
        self.schedule(ep, plans, now)
    }

    fn schedule(&mut self, ep: usize, plans: Vec<Plan>, now: u64) -> Result<(), EngineError> {
        for plan in plans {
            let local = match self.map.home(plan.line) {
                Home::Cxl { endpoint, local } if endpoint == ep && local < self.cfg.device.capacity_bytes => local,
                _ => {
                    self.c.pf.unroutable += 1;
                    continue;
                }
            };
            self.pend(plan.line);
            if plan.issue_cycle > now {
                self.queue.push(plan.issue_cycle, Ev::PrefetchTimer { ep, line: plan.line, local });
            } else {
                self.device_prefetch(ep, plan.line, local, now)?;
            }
        }
        Ok(())
    }

    fn device_prefetch(&mut self, ep: usize, line: u64, local: u64, now: u64) -> Result<bool, EngineError> {
        match self.eps[ep].device.issue_prefetch(line, local, now)? {
            PrefetchIssue::Queued { dispatch_at } => {
                self.c.pf.issued += 1;
                if let Some(at) = dispatch_at {
                    self.queue.push(at, Ev::DeviceDispatch { ep });
                }
                Ok(true)
            }
            PrefetchIssue::Suppressed => {
                self.c.pf.suppressed += 1;
                self.unpend(line);
                Ok(false)
            }
        }
    }

    fn at_device(&mut self, ep: usize, msg: Message, now: u64) -> Result<(), EngineError> {
        let Home::Cxl { local, .. } = self.map.home(msg.addr) else {
            return Err(EngineError::Device(DeviceError::OutOfRange { addr: msg.addr, capacity: 0 }));
        };
        match msg.opcode {
            Opcode::MemRd if msg.prefetch => {
                if self.device_prefetch(ep, msg.addr, local, now)? {
                    self.host_pf_tags.insert((ep, local & !(LINE_BYTES - 1)), msg.tag);
                } else {
                    self.host_pf_out.remove(&msg.tag);
                }
            }
            Opcode::MemRd | Opcode::MemRdPC | Opcode::MemWr => match self.eps[ep].device.ingest_demand(&msg, local, now)? {
                Ingest::Queued { pc, dispatch_at } => {
                    if let Some(at) = dispatch_at {
                        self.queue.push(at, Ev::DeviceDispatch { ep });
                    }
                    let record = self.record_of(msg.addr);
                    let entry = WindowEntry { pc: pc.unwrap_or(0), line: msg.addr, arrival_cycle: now, is_read: true };
                    self.observe(ep, Observation { entry, record, kind: ObservationKind::Demand }, now)?;
                }
                Ingest::Written { ndr_cycle } => {
                    self.send(Direction::Up, ep, Message::cmp(msg.addr, msg.tag), ndr_cycle)?;
                }
            },
            Opcode::BIRsp => {}
            other => return Err(EngineError::Device(DeviceError::Unexpected(other))),
        }
        Ok(())
    }

    fn record_of(&self, line: u64) -> u64 {
        self.mshr.get(&line).map_or(0, |m| m.record)
    }

    fn media_done(&mut self, ep: usize, done: ReadDone, now: u64) -> Result<(), EngineError> {
        let req = done.request;
        let data = line_payload(req.host_line);
        match req.kind {
            ReadKind::Demand { tag } => self.send(Direction::Up, ep, Message::mem_data(req.host_line, data, tag), now)?,
            ReadKind::Prefetch => {
                if let Some(tag) = self.host_pf_tags.remove(&(ep, req.line)) {
                    self.send(Direction::Up, ep, Message::mem_data(req.host_line, data, tag).with_prefetch(true), now)?;
                } else {
                    let tag = self.push_tag();
                    self.send(Direction::Up, ep, Message::bisnp_data(req.host_line, tag), now)?;
                    self.send(Direction::Up, ep, Message::mem_data(req.host_line, data, tag).with_prefetch(true), now)?;
                }
                self.eps[ep].device.prefetch_sent(req.line);
            }
        }
        Ok(())
    }

    fn at_host(&mut self, ep: usize, msg: Message, now: u64) -> Result<(), EngineError> {
        match msg.opcode {
            Opcode::BISnpData => {
                self.announced.insert(msg.tag, msg.addr);
                self.send(Direction::Down, ep, Message::bi_rsp(msg.addr, msg.tag), now)?;
            }
            Opcode::MemData if msg.prefetch => {
                let known = if msg.tag & PUSH_TAG != 0 { self.announced.remove(&msg.tag) } else { self.host_pf_out.remove(&msg.tag) };
                if known != Some(msg.addr) {
                    return Err(ProtocolError::UnannouncedPayload(msg.tag).into());
                }
                let line = msg.addr;
                let late = self.pending.get(&line).is_some_and(|p| p.late);
                if late || self.mshr.get(&line).is_some_and(|m| m.probed) {
                    if !late {
                        self.c.pf.late += 1;
                        self.pending.entry(line).or_default().late = true;
                    }
                } else {
                    match self.caches.deliver_prefetch(line, msg.payload.expect("validated MemData"), now) {
                        Delivery::Inserted { evicted } => {
                            self.c.pf.delivered += 1;
                            self.c.pf.evicted_unused += evicted.is_some() as u64;
                        }
                        Delivery::Stale => self.c.pf.stale += 1,
                        Delivery::Redundant => self.c.pf.redundant += 1,
                    }
                }
                self.unpend(line);
            }
            Opcode::MemData => {
                let line = self.demand_tags.remove(&msg.tag).filter(|&l| l == msg.addr).ok_or(ProtocolError::UnannouncedPayload(msg.tag))?;
                self.miss_done(line, now)?;
            }
            Opcode::Cmp => {}
            other => return Err(EngineError::Device(DeviceError::Unexpected(other))),
        }
        Ok(())
    }

    fn report(self) -> MetricsReport {
        let c = self.c;
        let records = self.trace.len() as u64;
        let ipa = self.cfg.cpu.instructions_per_access;
        let instructions = records * ipa;
        let mut pf = c.pf;
        pf.accuracy = ratio(pf.used, pf.delivered);
        pf.coverage = ratio(c.hits.reflector, c.hits.llc_misses());
        let mean = if records == 0 { 0.0 } else { c.latency_sum as f64 / records as f64 };
        let per_ns = self.cfg.cpu.freq_mhz as f64 / 1000.0;
        let config = ResolvedRun {
            run: None,
            trace: TraceFingerprint::of(self.trace),
            topology: self.topology.to_spec(),
            prefetcher: self.prefetcher.spec.clone(),
            sim: self.cfg,
            seed: self.seed,
            weights_sha256: self.prefetcher.weights.as_ref().map(|w| {
                use sha2::{Digest, Sha256};
                hex::encode(Sha256::digest(w.to_bytes()))
            }),
        };
        MetricsReport {
            prefetcher: self.prefetcher.id().to_string(),
            records,
            instructions,
            instructions_per_access: ipa,
            hits: c.hits,
            mpki: ratio(c.hits.llc_misses() * 1000, instructions),
            prefetch: pf,
            total_cycles: c.end,
            stall_cycles: c.stall,
            mean_latency_cycles: mean,
            mean_latency_ns: mean / per_ns,
            exec_time_ns: c.end as f64 / per_ns,
            baseline: None,
            speedup: None,
            max_reflector_occupancy: self.caches.reflector().peak(),
            notifications: c.notifications,
            writebacks: c.writebacks,
            internal_cache_scale: self.cfg.device.internal_cache_scale(),
            devices: self.eps.iter().map(|e| e.device.stats()).collect(),
            config_hash: config.hash(),
            config,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::MediaProfile;
    use crate::trace::TraceRecord;

    fn cycles(ns: f64) -> u64 {
        (ns * 3.6).ceil() as u64
    }

    fn topo(depth: u32, media: MediaProfile) -> Topology {
        Topology::chain(depth, Latency::from_ns(20.0), Latency::from_ns(80.0), media)
    }

    fn run(trace: &Trace, t: &Topology, pf: &Prefetcher, cfg: &SimConfig) -> MetricsReport {
        Simulation::new(trace, t, pf, cfg, 7).unwrap().run().unwrap()
    }

    #[test]
    fn empty_trace_reports_zero() {
        let r = run(&Trace::empty(), &topo(1, MediaProfile::znand()), &Prefetcher::none(), &SimConfig::default());
        assert_eq!(r.total_cycles, 0);
        assert_eq!(r.hits, LevelCounts::default());
        assert_eq!(r.prefetch, PrefetchCounts::default());
        assert_eq!(r.stall_cycles, 0);
    }

    #[test]
    fn single_cold_read_round_trip() {
        let trace = Trace::new(vec![TraceRecord::read(1, 4096, 100)]).unwrap();
        let r = run(&trace, &topo(1, MediaProfile::znand()), &Prefetcher::none(), &SimConfig::default());
        // llc lookup, down 20 + 20 + 80 ns, internal miss 37.2 ns + 3 us, back up
        let expected = 100 + 40 + cycles(120.0) + cycles(37.2) + cycles(3000.0) + cycles(120.0);
        assert_eq!(r.total_cycles, expected);
        assert_eq!(r.hits.miss, 1);
    }

    #[test]
    fn local_dram_read() {
        let trace = Trace::new(vec![TraceRecord::read(1, 4096, 0), TraceRecord::read(1, 4100, 1000)]).unwrap();
        let r = run(&trace, &topo(1, MediaProfile::znand()), &Prefetcher::none(), &SimConfig::local_dram());
        assert_eq!(r.total_cycles, 1005);
        assert_eq!(r.mean_latency_cycles, (40 + cycles(66.0) + 5) as f64 / 2.0);
        assert_eq!((r.hits.miss, r.hits.l1), (1, 1));
    }

    #[test]
    fn concurrent_misses_merge() {
        let trace = Trace::new(vec![TraceRecord::read(1, 4096, 0), TraceRecord::read(1, 4104, 1)]).unwrap();
        let r = run(&trace, &topo(0, MediaProfile::dram()), &Prefetcher::none(), &SimConfig::default());
        assert_eq!((r.hits.miss, r.hits.merged), (2, 1));
        assert_eq!(r.devices[0].demand_reads, 1);
    }

    #[test]
    fn outstanding_limit_stalls_issue() {
        let recs: Vec<_> = (0..3).map(|i| TraceRecord::read(1, i * 4096, 0)).collect();
        let trace = Trace::new(recs).unwrap();
        let mut cfg = SimConfig::local_dram();
        cfg.cpu.max_outstanding = 1;
        let r = run(&trace, &topo(0, MediaProfile::dram()), &Prefetcher::none(), &cfg);
        let miss = 40 + cycles(66.0);
        assert_eq!(r.total_cycles, 3 * miss);
        assert_eq!(r.stall_cycles, 3 * miss - miss);
    }

    #[test]
    fn local_dram_rejects_prefetcher() {
        let pf = Prefetcher::new(PrefetcherSpec::Spatial { degree: 2 });
        let err = Simulation::new(&Trace::empty(), &topo(0, MediaProfile::dram()), &pf, &SimConfig::local_dram(), 0).err().unwrap();
        assert!(matches!(err, EngineError::Config(ref e) if e[0].contains("local_dram")), "{err}");
    }

    fn strided(n: u64, gap: u64) -> Trace {
        let recs = (0..n).map(|i| TraceRecord::read(0x40, i * 64 * 64, i * gap)).collect();
        Trace::new(recs).unwrap()
    }

    #[test]
    fn perfect_oracle_is_timely_on_slow_stream() {
        let trace = strided(400, 4000);
        let spec = PrefetcherSpec::Oracle {
            coverage: 1.0,
            accuracy: None,
            degree: 4,
            margin_ns: Latency::from_ns(100.0),
            timeliness: Timeliness::Aware,
        };
        let r = run(&trace, &topo(2, MediaProfile::dram()), &Prefetcher::new(spec), &SimConfig::default());
        assert_eq!(r.hits.total(), 400);
        assert_eq!(r.prefetch.late, 0);
        assert!(r.hits.reflector > 390, "{:?}", r.hits);
        assert_eq!(r.prefetch.accuracy, 1.0);
        assert!(r.notifications > 0);
        assert!(r.max_reflector_occupancy <= 256);
    }

    #[test]
    fn host_baselines_conserve_accesses() {
        let trace = strided(2000, 50);
        for spec in [PrefetcherSpec::Spatial { degree: 4 }, PrefetcherSpec::Temporal { degree: 4, entries: 64 }] {
            let r = run(&trace, &topo(1, MediaProfile::pmem()), &Prefetcher::new(spec), &SimConfig::default());
            assert_eq!(r.hits.total(), 2000);
            assert!(r.prefetch.delivered >= r.prefetch.used);
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let trace = strided(500, 200);
        let spec = PrefetcherSpec::Oracle {
            coverage: 0.5,
            accuracy: None,
            degree: 2,
            margin_ns: Latency::ZERO,
            timeliness: Timeliness::Unaware,
        };
        let pf = Prefetcher::new(spec);
        let t = topo(2, MediaProfile::znand());
        let a = run(&trace, &t, &pf, &SimConfig::default()).to_json();
        let b = run(&trace, &t, &pf, &SimConfig::default()).to_json();
        assert_eq!(a, b);
    }
}
