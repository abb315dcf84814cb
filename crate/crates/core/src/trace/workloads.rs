//! Small named workloads used by the sweeps, the acceptance suite and the CLI.

use super::{gen_apex, gen_graph_walk, gen_strided, interleave, GraphWalkParams, LocalityParams, StridedParams, Trace};

#[derive(Clone, Debug)]
pub struct BundledWorkload {
    pub name: &'static str,
    pub trace: Trace,
}

const MIB: u64 = 1 << 20;

/// Every bundled workload with `records` accesses per core.
pub fn bundled_workloads(records: u64) -> Vec<BundledWorkload> {
    let apex = |alpha: f64, l: u64, seed: u64| {
        gen_apex(&LocalityParams::new(alpha, l, 64 * MIB, records, seed)).expect("valid bundled params")
    };
    let strided = gen_strided(&StridedParams::new(64, records, 0, 0x41_0000)).expect("valid bundled params");
    let graph = gen_graph_walk(&GraphWalkParams::new(100_000, 4, records, 7)).expect("valid bundled params");
    let mix = {
        let a = apex(0.5, 8, 11);
        let b = gen_strided(&StridedParams::new(128, records, 32 * MIB, 0x42_0000)).expect("valid bundled params");
        interleave(&[a, b], &[0, 1]).expect("distinct cores")
    };
    vec![
        BundledWorkload { name: "apex-random", trace: apex(1.0, 4, 1) },
        BundledWorkload { name: "apex-local", trace: apex(0.01, 64, 2) },
        BundledWorkload { name: "strided", trace: strided },
        BundledWorkload { name: "graph", trace: graph },
        BundledWorkload { name: "mix", trace: mix },
    ]
}
