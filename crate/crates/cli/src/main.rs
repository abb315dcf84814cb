use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use xpand::engine::{
    self, sweep_effectiveness, sweep_switch_depth, write_sweep_csv, EngineError, MetricsReport, OracleTemplate, Prefetcher,
    PrefetcherSpec, RunConfig, Timeliness, TraceFingerprint,
};
use xpand::prefetch::{train::write_loss_csv, train_predictor, TrainConfig};
use xpand::topology::Topology;
use xpand::trace::{
    gen_apex, gen_graph_walk, gen_strided, load_csv, load_trace, save_csv, save_trace, GraphWalkParams, LocalityParams, StridedParams,
    Trace, TraceError, TraceSummary,
};
use xpand::Latency;

#[derive(Parser)]
#[command(name = "xpand", version, about = "Trace-driven CXL prefetching simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic trace.
    GenTrace {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Train the address predictor on one or more traces.
    Train(TrainArgs),
    /// Simulate one run config and write its JSON and CSV reports.
    Run(RunArgs),
    /// Run a parameter sweep and write one CSV row per point.
    Sweep {
        #[command(subcommand)]
        kind: SweepKind,
    },
    /// Re-emit a saved report.
    Report(ReportArgs),
}

#[derive(Args)]
struct TraceOut {
    /// Output path; a `.csv` extension writes text, anything else binary.
    #[arg(long)]
    out: PathBuf,
    /// Cycles between consecutive issues.
    #[arg(long, default_value_t = 100)]
    gap: u64,
}

#[derive(Subcommand)]
enum GenKind {
    /// Power-law locality generator.
    Apex {
        #[arg(long)]
        alpha: f64,
        /// Consecutive 8-byte elements per visit.
        #[arg(long = "L")]
        vector_len: u64,
        #[arg(long, default_value_t = 64 << 20)]
        footprint: u64,
        #[arg(long, default_value_t = 100_000)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        write_fraction: f64,
        #[command(flatten)]
        out: TraceOut,
    },
    /// Fixed-stride stream.
    Strided {
        #[arg(long)]
        stride: u64,
        #[arg(long)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        base: u64,
        #[arg(long, default_value_t = 0x40_0000)]
        pc: u64,
        #[command(flatten)]
        out: TraceOut,
    },
    /// Random walk over a scale-free graph.
    Graph {
        #[arg(long, default_value_t = 100_000)]
        nodes: u64,
        #[arg(long, default_value_t = 4)]
        edge_factor: u64,
        #[arg(long, default_value_t = 100_000)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: TraceOut,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long = "trace", required = true)]
    traces: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train without the PC modality.
    #[arg(long)]
    no_pc: bool,
    /// Keep only the first N records of each trace.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss curve.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// A run config, or a report whose embedded config is re-run.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    json: PathBuf,
    #[arg(long)]
    csv: PathBuf,
}

#[derive(Subcommand)]
enum SweepKind {
    /// Oracle prefetching at each coverage level.
    Effectiveness {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        levels: Vec<f64>,
        #[arg(long, default_value_t = 4)]
        degree: usize,
        #[arg(long, default_value_t = 0.0)]
        margin_ns: f64,
        #[arg(long, value_enum, default_value_t = Mode::Aware)]
        timeliness: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// The config's prefetcher at each switch depth, aware and unaware.
    Depth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "0,1,2,3,4")]
        depths: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Aware,
    Unaware,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

/// A run config with every input loaded.
struct Loaded {
    cfg: RunConfig,
    trace: Trace,
    topology: Topology,
    prefetcher: Prefetcher,
}

fn read_trace(path: &Path) -> anyhow::Result<Trace> {
    let t = if path.extension().is_some_and(|e| e == "csv") { load_csv(path) } else { load_trace(path) };
    t.with_context(|| format!("trace {}", path.display()))
}

fn write_trace(trace: &Trace, path: &Path) -> Result<(), TraceError> {
    if path.extension().is_some_and(|e| e == "csv") {
        save_csv(trace, path)
    } else {
        save_trace(trace, path)
    }
}

/// Accepts a run config or a saved report, whose embedded config must name
/// the same trace bytes it was produced from.
fn load_config(path: &Path) -> anyhow::Result<Loaded> {
    let text = fs::read_to_string(path).with_context(|| format!("config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Failure::config(vec![format!("config: {e}")]))?;
    let (cfg, expect) = match value.get("config").and_then(|c| c.get("run")) {
        Some(run) if !run.is_null() => {
            let cfg = RunConfig::from_json(&run.to_string()).map_err(Failure::config)?;
            let fp: TraceFingerprint = serde_json::from_value(value["config"]["trace"].clone()).context("embedded trace fingerprint")?;
            (cfg, Some(fp))
        }
        _ => (RunConfig::from_json(&text).map_err(Failure::config)?, None),
    };
    let trace = read_trace(&cfg.trace)?;
    if let Some(fp) = expect {
        if TraceFingerprint::of(&trace) != fp {
            bail!("trace {} no longer matches the report it was run for", cfg.trace.display());
        }
    }
    let topology = Topology::load(&cfg.topology).with_context(|| format!("topology {}", cfg.topology.display()))?;
    let prefetcher = Prefetcher::load(cfg.prefetcher.clone())?;
    Ok(Loaded { cfg, trace, topology, prefetcher })
}

fn simulate(l: &Loaded) -> anyhow::Result<MetricsReport> {
    let c = &l.cfg;
    let mut report = engine::run(&l.trace, &l.topology, &l.prefetcher, &c.sim, c.seed).map_err(engine_failure)?;
    if let Some(b) = &c.baseline {
        let base = engine::run(&l.trace, &l.topology, &Prefetcher::load(b.clone())?, &c.sim, c.seed).map_err(engine_failure)?;
        report = report.with_speedup(b.id(), &base);
    }
    report.config.run = Some(c.clone());
    report.config_hash = report.config.hash();
    Ok(report)
}

fn engine_failure(e: EngineError) -> anyhow::Error {
    match e {
        EngineError::Config(errs) => Failure::config(errs).into(),
        other => other.into(),
    }
}

/// A failure with a list of messages, reported as JSON on stderr.
#[derive(Debug)]
struct Failure {
    kind: &'static str,
    messages: Vec<String>,
}

impl Failure {
    fn config(messages: Vec<String>) -> Self {
        Failure { kind: "config", messages }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.messages.join("; "))
    }
}

impl std::error::Error for Failure {}

fn gen_trace(kind: GenKind) -> anyhow::Result<()> {
    let (trace, out) = match kind {
        GenKind::Apex { alpha, vector_len, footprint, count, seed, write_fraction, out } => {
            let p = LocalityParams { issue_gap: out.gap, write_fraction, ..LocalityParams::new(alpha, vector_len, footprint, count, seed) };
            (gen_apex(&p), out)
        }
        GenKind::Strided { stride, count, base, pc, out } => {
            let p = StridedParams { issue_gap: out.gap, ..StridedParams::new(stride, count, base, pc) };
            (gen_strided(&p), out)
        }
        GenKind::Graph { nodes, edge_factor, count, seed, out } => {
            let p = GraphWalkParams { issue_gap: out.gap, ..GraphWalkParams::new(nodes, edge_factor, count, seed) };
            (gen_graph_walk(&p), out)
        }
    };
    let trace = trace.map_err(|e| match e {
        TraceError::InvalidParam { .. } => anyhow::Error::new(Failure { kind: "usage", messages: vec![e.to_string()] }),
        other => other.into(),
    })?;
    write_trace(&trace, &out.out).with_context(|| format!("writing {}", out.out.display()))?;
    let s = TraceSummary::of(&trace);
    println!("records: {}", s.records);
    println!("footprint: {} lines ({} bytes)", s.footprint_lines, s.footprint_bytes);
    match s.reuse_median {
        Some(m) => println!("reuse distance median: {m}"),
        None => println!("reuse distance median: none"),
    }
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let traces = a
        .traces
        .iter()
        .map(|p| read_trace(p).map(|t| a.limit.map_or(t.clone(), |n| t.truncated(n))))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let cfg = TrainConfig { use_pc: !a.no_pc, ..TrainConfig::new(a.epochs, a.lr, a.seed) };
    let out = train_predictor(&traces, &cfg)?;
    out.weights.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.loss_csv {
        write_loss_csv(&out.curve, fs::File::create(path).with_context(|| format!("writing {}", path.display()))?)?;
    }
    for e in &out.curve {
        println!("epoch {}: loss {:.4} accuracy {:.3}", e.epoch, e.loss, e.accuracy);
    }
    Ok(())
}

fn run(a: RunArgs) -> anyhow::Result<()> {
    let report = simulate(&load_config(&a.config)?)?;
    fs::write(&a.json, report.to_json() + "\n").with_context(|| format!("writing {}", a.json.display()))?;
    fs::write(&a.csv, report.to_csv()).with_context(|| format!("writing {}", a.csv.display()))?;
    println!("{} cycles, config {}", report.total_cycles, report.config_hash);
    Ok(())
}

fn sweep(kind: SweepKind) -> anyhow::Result<()> {
    let (points, out) = match kind {
        SweepKind::Effectiveness { config, levels, degree, margin_ns, timeliness, out } => {
            let l = load_config(&config)?;
            let timeliness = match timeliness {
                Mode::Aware => Timeliness::Aware,
                Mode::Unaware => Timeliness::Unaware,
            };
            let tmpl = OracleTemplate { degree, margin_ns: Latency::from_ns(margin_ns), timeliness };
            (sweep_effectiveness(&l.trace, &l.topology, &levels, tmpl, &l.cfg.sim, l.cfg.seed).map_err(engine_failure)?, out)
        }
        SweepKind::Depth { config, depths, out } => {
            let l = load_config(&config)?;
            if !matches!(l.cfg.prefetcher, PrefetcherSpec::Oracle { .. } | PrefetcherSpec::Expand { .. }) {
                bail!(Failure::config(vec!["prefetcher: a depth sweep needs `oracle` or `expand`".into()]));
            }
            (sweep_switch_depth(&l.trace, &l.topology, &depths, &l.prefetcher, &l.cfg.sim, l.cfg.seed).map_err(engine_failure)?, out)
        }
    };
    let file = fs::File::create(&out).with_context(|| format!("writing {}", out.display()))?;
    write_sweep_csv(&points, file)?;
    println!("{} points written to {}", points.len(), out.display());
    Ok(())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("report {}", a.input.display()))?;
    let r: MetricsReport = serde_json::from_str(&text).with_context(|| format!("report {}", a.input.display()))?;
    match a.format {
        Format::Json => println!("{}", r.to_json()),
        Format::Csv => print!("{}", r.to_csv()),
        Format::Text => {
            let h = &r.hits;
            println!("prefetcher {} on {} records", r.prefetcher, r.records);
            println!("hits l1 {} l2 {} llc {} reflector {} miss {}", h.l1, h.l2, h.llc, h.reflector, h.miss);
            println!("mpki {:.3}", r.mpki);
            println!("accuracy {:.3} coverage {:.3} late {}", r.prefetch.accuracy, r.prefetch.coverage, r.prefetch.late);
            println!("exec time {:.1} ns, mean latency {:.1} ns", r.exec_time_ns, r.mean_latency_ns);
            if let (Some(b), Some(s)) = (&r.baseline, r.speedup) {
                println!("speedup {s:.3} over {b}");
            }
            println!("config {}", r.config_hash);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenTrace { kind } => gen_trace(kind),
        Cmd::Train(a) => train(a),
        Cmd::Run(a) => run(a),
        Cmd::Sweep { kind } => sweep(kind),
        Cmd::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, messages, code) = match e.downcast_ref::<Failure>() {
                Some(f) => (f.kind, f.messages.clone(), if f.kind == "usage" { 2 } else { 1 }),
                None => ("error", e.chain().map(|c| c.to_string()).collect(), 1),
            };
            eprintln!("{}", json!({ "error": kind, "messages": messages }));
            ExitCode::from(code)
        }
    }
}
