//! Offline training of the address model on next pc-local line deltas.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::classifier::{line_stream, BehaviorClassifier};
use super::features::line_delta;
use super::model::{AddressModel, Batch, ModelDims, Params};
use super::vocab::{DeltaVocab, DEFAULT_VOCAB};
use super::weights::Weights;
use super::window::{SlidingWindow, WindowEntry, DEFAULT_WINDOW};
use crate::trace::Trace;

/// Gradient chunk size; fixed so the summation order never depends on
/// the worker count.
const GRAD_CHUNK: usize = 16;

pub fn pc_bucket(pc: u64, buckets: usize) -> usize {
    let mut z = pc.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ((z ^ (z >> 31)) % buckets as u64) as usize
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub pc: Vec<usize>,
    pub delta: Vec<usize>,
    pub flag: bool,
    pub target: usize,
    /// Raw pc of the most recent access, for per-pc evaluation.
    pub last_pc: u64,
}

/// Global line deltas between consecutive accesses, one per access after the first.
pub fn input_deltas(entries: &[WindowEntry]) -> impl Iterator<Item = i64> + '_ {
    entries.windows(2).map(|w| line_delta(w[0].line, w[1].line))
}

/// For each access, the delta to the next access by the same pc.
pub fn pc_local_targets(entries: &[WindowEntry]) -> Vec<Option<i64>> {
    let mut next: HashMap<u64, u64> = HashMap::new();
    let mut out = vec![None; entries.len()];
    for (i, e) in entries.iter().enumerate().rev() {
        out[i] = next.get(&e.pc).map(|&l| line_delta(e.line, l));
        next.insert(e.pc, e.line);
    }
    out
}

/// Classifier change flags for every prefix of the stream.
pub fn change_flags(entries: &[WindowEntry]) -> Vec<bool> {
    let mut c = BehaviorClassifier::default();
    let mut w = SlidingWindow::new(DEFAULT_WINDOW);
    entries
        .iter()
        .map(|e| {
            w.push(*e);
            c.classify(&w).1
        })
        .collect()
}

pub fn encode_tokens(
    entries: &[WindowEntry],
    vocab: &DeltaVocab,
    dims: &ModelDims,
    use_pc: bool,
) -> (Vec<usize>, Vec<usize>) {
    debug_assert_eq!(entries.len(), dims.seq_len + 1);
    let pcs = entries[1..].iter().map(|e| if use_pc { pc_bucket(e.pc, dims.pc_buckets) } else { 0 }).collect();
    let deltas = input_deltas(entries).map(|d| vocab.id(d)).collect();
    (pcs, deltas)
}

/// Every position with a full token history and a known target.
pub fn build_samples(entries: &[WindowEntry], vocab: &DeltaVocab, dims: &ModelDims, use_pc: bool) -> Vec<Sample> {
    let t = dims.seq_len;
    if entries.len() <= t {
        return Vec::new();
    }
    let targets = pc_local_targets(entries);
    let flags = change_flags(entries);
    (t..entries.len())
        .filter_map(|i| {
            let target = targets[i]?;
            let (pc, delta) = encode_tokens(&entries[i - t..=i], vocab, dims, use_pc);
            Some(Sample { pc, delta, flag: flags[i], target: vocab.id(target), last_pc: entries[i].pc })
        })
        .collect()
}

pub fn vocab_for(streams: &[Vec<WindowEntry>], k: usize) -> DeltaVocab {
    let all = streams.iter().flat_map(|s| {
        let targets = pc_local_targets(s);
        input_deltas(s).chain(targets.into_iter().flatten()).collect::<Vec<_>>()
    });
    DeltaVocab::build(all, k)
}

pub fn batch_of(samples: &[&Sample]) -> (Batch, Vec<usize>) {
    let mut b = Batch::default();
    for s in samples {
        b.push(&s.pc, &s.delta, s.flag);
    }
    (b, samples.iter().map(|s| s.target).collect())
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training traces given")]
    NoTraces,
    #[error("traces yield no training samples (need more than {0} distinct-line accesses)")]
    NoSamples(usize),
    #[error("loss diverged at epoch {epoch} step {step}: loss {loss}, gradient norm {grad_norm}, lr {lr}")]
    Diverged { epoch: usize, step: usize, loss: f64, grad_norm: f64, lr: f64 },
    #[error("invalid training parameter `{0}`")]
    Param(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 5.0 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub cfg: Adam,
    m: Params,
    v: Params,
    t: i32,
}

impl AdamState {
    pub fn new(cfg: Adam, like: &Params) -> Self {
        AdamState { cfg, m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut Params, mut grad: Params) -> f64 {
        let norm = grad.norm();
        if norm > self.cfg.clip_norm {
            grad.scale(self.cfg.clip_norm / norm);
        }
        self.t += 1;
        let c = self.cfg;
        let (bc1, bc2) = (1.0 - c.beta1.powi(self.t), 1.0 - c.beta2.powi(self.t));
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            });
        }
        norm
    }
}

/// Mean loss and gradient over `samples`, reduced in chunk order.
pub fn batch_gradient(model: &AddressModel, samples: &[&Sample]) -> (f64, Params, usize) {
    let parts: Vec<(f64, Params, usize)> = samples
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let (b, y) = batch_of(chunk);
            let (loss, g, fw) = model.loss_and_grad(&b, &y);
            let correct = y.iter().enumerate().filter(|&(i, &t)| argmax(fw.probs.row(i).iter().copied()) == t).count();
            (loss, g, correct)
        })
        .collect();
    let mut iter = parts.into_iter();
    let (mut loss, mut grad, mut correct) = iter.next().expect("non-empty batch");
    for (l, g, c) in iter {
        loss += l;
        grad.add_assign(&g);
        correct += c;
    }
    let n = samples.len() as f64;
    grad.scale(1.0 / n);
    (loss / n, grad, correct)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub vocab_size: usize,
    pub use_pc: bool,
    pub dims: Option<ModelDims>,
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64, seed: u64) -> Self {
        TrainConfig { epochs, lr, seed, batch_size: 64, vocab_size: DEFAULT_VOCAB, use_pc: true, dims: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: Weights,
    pub curve: Vec<EpochStats>,
}

pub fn dims_for(cfg: &TrainConfig, vocab: &DeltaVocab) -> ModelDims {
    let mut d = cfg.dims.unwrap_or_else(|| ModelDims::standard(vocab.classes()));
    d.vocab = vocab.classes();
    d
}

pub fn train_predictor(traces: &[Trace], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if traces.is_empty() {
        return Err(TrainError::NoTraces);
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(TrainError::Param("lr"));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Param("batch_size"));
    }
    let streams: Vec<Vec<WindowEntry>> = traces.iter().map(line_stream).collect();
    let vocab = vocab_for(&streams, cfg.vocab_size);
    let dims = dims_for(cfg, &vocab);
    dims.validate().map_err(|_| TrainError::Param("dims"))?;
    let samples: Vec<Sample> = streams.iter().flat_map(|s| build_samples(s, &vocab, &dims, cfg.use_pc)).collect();
    if samples.is_empty() {
        return Err(TrainError::NoSamples(dims.seq_len));
    }
    let mut model = AddressModel::new(dims, cfg.seed);
    let curve = fit(&mut model, &samples, cfg)?;
    Ok(TrainOutcome { weights: Weights { model, vocab, use_pc: cfg.use_pc }, curve })
}

/// Minibatch Adam over `samples` for `cfg.epochs` epochs.
pub fn fit(model: &mut AddressModel, samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<EpochStats>, TrainError> {
    let mut opt = AdamState::new(Adam { lr: cfg.lr, ..Adam::default() }, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let (loss, grad, c) = batch_gradient(model, &batch);
            let grad_norm = grad.norm();
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(TrainError::Diverged { epoch, step, loss, grad_norm, lr: cfg.lr });
            }
            opt.step(&mut model.params, grad);
            loss_sum += loss * batch.len() as f64;
            correct += c;
        }
        let n = samples.len() as f64;
        curve.push(EpochStats { epoch, loss: loss_sum / n, accuracy: correct as f64 / n });
    }
    Ok(curve)
}

pub fn write_loss_csv(curve: &[EpochStats], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "loss", "accuracy"])?;
    for s in curve {
        w.write_record([s.epoch.to_string(), format!("{:.6}", s.loss), format!("{:.6}", s.accuracy)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub samples: usize,
    pub correct: usize,
    /// pc -> (samples, correct)
    pub per_pc: BTreeMap<u64, (usize, usize)>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.correct as f64 / self.samples as f64
        }
    }

    pub fn pc_accuracy(&self, pc: u64) -> Option<f64> {
        self.per_pc.get(&pc).map(|&(n, c)| c as f64 / n as f64)
    }
}

/// Top-1 accuracy of `weights` on every sample of `trace`.
pub fn evaluate(weights: &Weights, trace: &Trace) -> Evaluation {
    let stream = line_stream(trace);
    let samples = build_samples(&stream, &weights.vocab, &weights.model.dims, weights.use_pc);
    let mut ev = Evaluation::default();
    for chunk in samples.chunks(256) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (b, y) = batch_of(&refs);
        let fw = weights.model.forward(&b);
        for (i, s) in chunk.iter().enumerate() {
            let ok = argmax(fw.probs.row(i).iter().copied()) == y[i];
            let e = ev.per_pc.entry(s.last_pc).or_default();
            e.0 += 1;
            e.1 += ok as usize;
            ev.samples += 1;
            ev.correct += ok as usize;
        }
    }
    ev
}
