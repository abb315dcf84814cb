//! Behavior classifier: a CART tree grown best-first to exactly 64 leaves,
//! pretrained on windows cut from labeled synthetic traces.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{extract, FeatureVec, FEATURES};
use super::window::{SlidingWindow, WindowEntry, DEFAULT_WINDOW};
use crate::trace::{
    gen_apex, gen_graph_walk, gen_strided, GraphWalkParams, LocalityParams, Op, StridedParams, Trace, TraceRecord,
};

pub const CATEGORIES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { category: u8 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
    leaves: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub struct TreeError(pub String);

struct Candidate {
    node: usize,
    rows: Vec<usize>,
    split: Option<(usize, f64, f64)>,
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / nf).powi(2)).sum::<f64>()
}

/// Best (feature, threshold, weighted impurity decrease) for a node.
fn best_split(x: &[FeatureVec], y: &[usize], classes: usize, rows: &[usize]) -> Option<(usize, f64, f64)> {
    let n = rows.len();
    let mut total = vec![0usize; classes];
    for &r in rows {
        total[y[r]] += 1;
    }
    let parent = gini(&total, n) * n as f64;
    let mut best: Option<(usize, f64, f64)> = None;
    let mut sorted = rows.to_vec();
    for f in 0..FEATURES {
        sorted.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let mut left = vec![0usize; classes];
        for i in 0..n - 1 {
            left[y[sorted[i]]] += 1;
            let (v, next) = (x[sorted[i]][f], x[sorted[i + 1]][f]);
            if v == next {
                continue;
            }
            let right: Vec<usize> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
            let nl = i + 1;
            let child = gini(&left, nl) * nl as f64 + gini(&right, n - nl) * (n - nl) as f64;
            let gain = parent - child;
            if gain > 1e-12 && best.is_none_or(|b| gain > b.2 + 1e-12) {
                best = Some((f, (v + next) / 2.0, gain));
            }
        }
    }
    best
}

/// Median split on the highest-variance feature, for leaves that are
/// already pure but must still be divided.
fn fallback_split(x: &[FeatureVec], rows: &[usize]) -> Option<(usize, f64)> {
    let n = rows.len() as f64;
    let mut order: Vec<(usize, f64)> = (0..FEATURES)
        .map(|f| {
            let mean = rows.iter().map(|&r| x[r][f]).sum::<f64>() / n;
            (f, rows.iter().map(|&r| (x[r][f] - mean).powi(2)).sum::<f64>() / n)
        })
        .filter(|&(_, v)| v > 0.0)
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().find_map(|(f, _)| {
        let mut vals: Vec<f64> = rows.iter().map(|&r| x[r][f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        (vals.len() > 1).then(|| {
            let mid = (vals.len() - 1) / 2;
            (f, (vals[mid] + vals[mid + 1]) / 2.0)
        })
    })
}

impl DecisionTree {
    /// Grows best-first by impurity decrease until exactly `leaves` leaves.
    pub fn fit(x: &[FeatureVec], y: &[usize], leaves: usize) -> Result<DecisionTree, TreeError> {
        if x.len() != y.len() || x.is_empty() {
            return Err(TreeError("need a non-empty labeled set".into()));
        }
        let classes = y.iter().max().unwrap() + 1;
        let mut nodes = vec![TreeNode::Leaf { category: 0 }];
        let root_rows: Vec<usize> = (0..x.len()).collect();
        let mut open = vec![Candidate { node: 0, split: best_split(x, y, classes, &root_rows), rows: root_rows }];
        let mut count = 1;
        while count < leaves {
            let pick = open
                .iter()
                .enumerate()
                .filter_map(|(i, c)| c.split.map(|s| (i, s.2)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i);
            let (idx, feature, threshold) = match pick {
                Some(i) => {
                    let (f, t, _) = open[i].split.unwrap();
                    (i, f, t)
                }
                None => {
                    let mut by_size: Vec<usize> = (0..open.len()).collect();
                    by_size.sort_by(|&a, &b| open[b].rows.len().cmp(&open[a].rows.len()).then(a.cmp(&b)));
                    let found = by_size.into_iter().find_map(|i| fallback_split(x, &open[i].rows).map(|(f, t)| (i, f, t)));
                    found.ok_or_else(|| TreeError(format!("only {count} separable leaves")))?
                }
            };
            let cand = open.swap_remove(idx);
            let (l, r): (Vec<usize>, Vec<usize>) = cand.rows.iter().partition(|&&row| x[row][feature] <= threshold);
            let (li, ri) = (nodes.len(), nodes.len() + 1);
            nodes.push(TreeNode::Leaf { category: 0 });
            nodes.push(TreeNode::Leaf { category: 0 });
            nodes[cand.node] = TreeNode::Split { feature, threshold, left: li, right: ri };
            open.push(Candidate { node: li, split: best_split(x, y, classes, &l), rows: l });
            open.push(Candidate { node: ri, split: best_split(x, y, classes, &r), rows: r });
            count += 1;
        }
        // Categories are leaf positions in a left-first depth-first walk.
        let mut next = 0u8;
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            match nodes[i] {
                TreeNode::Split { left, right, .. } => {
                    stack.push(right);
                    stack.push(left);
                }
                TreeNode::Leaf { .. } => {
                    nodes[i] = TreeNode::Leaf { category: next };
                    next += 1;
                }
            }
        }
        Ok(DecisionTree { nodes, leaves })
    }

    pub fn leaves(&self) -> usize {
        self.leaves
    }

    pub fn predict(&self, x: &FeatureVec) -> u8 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
                TreeNode::Leaf { category } => return category,
            }
        }
    }
}

/// Windows the behavior classifier is pretrained on, labeled by the
/// generator family that produced them.
pub fn pretraining_corpus(seed: u64, per_class: usize) -> (Vec<FeatureVec>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    let n = DEFAULT_WINDOW as u64 * 4;
    for k in 0..per_class {
        let s = rng.gen::<u64>();
        let base = rng.gen_range(0..1u64 << 30) & !63;
        let families: Vec<Trace> = vec![
            gen_strided(&StridedParams::new(64, n, base, 0x1000)).unwrap(),
            descending(n, base + (n << 6), 0x1050),
            gen_strided(&StridedParams::new(64 * rng.gen_range(2..=8), n, base, 0x1100)).unwrap(),
            gen_strided(&StridedParams::new(64 * rng.gen_range(9..=64), n, base, 0x1200)).unwrap(),
            gen_strided(&StridedParams::new(4096 * rng.gen_range(1..=16), n, base, 0x1300)).unwrap(),
            gen_apex(&LocalityParams::new(1.0, 1, 1 << 30, n, s)).unwrap(),
            gen_apex(&LocalityParams::new(rng.gen_range(0.2..0.6), 8, 1 << 24, n * 8, s)).unwrap(),
            gen_apex(&LocalityParams::new(rng.gen_range(0.01..0.1), 64, 1 << 22, n * 64, s)).unwrap(),
            gen_graph_walk(&GraphWalkParams::new(rng.gen_range(1000..50_000), rng.gen_range(1..6), n, s)).unwrap(),
            two_stream_mix(&mut rng, n, base),
            small_loop(&mut rng, n, base),
            write_heavy(gen_apex(&LocalityParams::new(1.0, 1, 1 << 26, n, s)).unwrap(), &mut rng),
        ];
        for (label, t) in families.into_iter().enumerate() {
            let entries = line_stream(&t);
            if entries.len() < DEFAULT_WINDOW {
                continue;
            }
            let start = (k * 7919) % (entries.len() - DEFAULT_WINDOW + 1);
            let w = SlidingWindow::from_entries(DEFAULT_WINDOW, entries[start..start + DEFAULT_WINDOW].iter().copied());
            x.push(extract(&w));
            y.push(label);
        }
    }
    (x, y)
}

/// Accesses as the device sees them: repeated touches of one line collapse.
pub fn line_stream(trace: &Trace) -> Vec<WindowEntry> {
    let mut out: Vec<WindowEntry> = Vec::with_capacity(trace.len());
    for r in trace.records() {
        if out.last().is_some_and(|e| e.line == r.line()) {
            continue;
        }
        out.push(WindowEntry { pc: r.pc, line: r.line(), arrival_cycle: r.cpu_cycle, is_read: r.op == Op::Read });
    }
    out
}

fn two_stream_mix(rng: &mut ChaCha8Rng, n: u64, base: u64) -> Trace {
    let (mut a, mut b) = (base, base + (1 << 28));
    let sb = 64 * rng.gen_range(2..=4);
    let recs = (0..n)
        .map(|i| {
            if rng.gen_bool(0.5) {
                a += 64;
                TraceRecord::read(0x2000, a, i)
            } else {
                b += sb;
                TraceRecord::read(0x2100, b, i)
            }
        })
        .collect();
    Trace::new(recs).unwrap()
}

fn descending(n: u64, top: u64, pc: u64) -> Trace {
    Trace::new((0..n).map(|i| TraceRecord::read(pc, top - i * 64, i)).collect()).unwrap()
}

fn small_loop(rng: &mut ChaCha8Rng, n: u64, base: u64) -> Trace {
    let set = rng.gen_range(4..24u64);
    let recs = (0..n).map(|i| TraceRecord::read(0x3000 + (i % set) * 8, base + (i % set) * 64 * 5, i)).collect();
    Trace::new(recs).unwrap()
}

fn write_heavy(t: Trace, rng: &mut ChaCha8Rng) -> Trace {
    let recs = t
        .records()
        .iter()
        .map(|r| TraceRecord { op: if rng.gen_bool(0.7) { Op::Write } else { Op::Read }, ..*r })
        .collect();
    Trace::new(recs).unwrap()
}

static PRETRAINED: OnceLock<DecisionTree> = OnceLock::new();

/// The shared pretrained tree, built on first use.
pub fn pretrained_tree() -> &'static DecisionTree {
    PRETRAINED.get_or_init(|| {
        let (x, y) = pretraining_corpus(0x7ee, 160);
        DecisionTree::fit(&x, &y, CATEGORIES).expect("pretraining corpus separates into 64 leaves")
    })
}

/// Tracks the category of successive windows and flags changes.
#[derive(Clone, Debug)]
pub struct BehaviorClassifier {
    tree: &'static DecisionTree,
    previous: Option<u8>,
}

impl Default for BehaviorClassifier {
    fn default() -> Self {
        BehaviorClassifier { tree: pretrained_tree(), previous: None }
    }
}

impl BehaviorClassifier {
    pub fn category(&self, window: &SlidingWindow) -> u8 {
        self.tree.predict(&extract(window))
    }

    /// Returns the category and whether it differs from the previous call.
    /// The first call always reports a change.
    pub fn classify(&mut self, window: &SlidingWindow) -> (u8, bool) {
        let c = self.category(window);
        let changed = self.previous != Some(c);
        self.previous = Some(c);
        (c, changed)
    }
}
