//! Inference and online refinement around a trained address model.

use std::collections::{HashMap, VecDeque};

use ndarray::{Array1, Array2, ArrayView1};
use thiserror::Error;

use super::model::{AddressModel, Batch, ModelDims};
use super::train::{build_samples, encode_tokens, pc_bucket, vocab_for, Adam, AdamState, Sample};
use super::vocab::{DeltaVocab, DEFAULT_VOCAB};
use super::weights::Weights;
use super::window::{SlidingWindow, WindowEntry};
use crate::trace::LINE_BYTES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PredictError {
    #[error("address predictor has no weights (load a weight file or enable online training)")]
    Uninitialized,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OnlineConfig {
    /// Refine after this many observations; 0 disables refinement.
    pub interval: usize,
    pub batch: usize,
    pub lr: f64,
    /// Observations needed before an untrained predictor builds its model.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig { interval: 256, batch: 32, lr: 1e-3, warmup: 512, seed: 0 }
    }
}

#[derive(Clone, Debug)]
struct TokenState {
    h: Array1<f64>,
    k: Array1<f64>,
    v: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct AddressPredictor {
    weights: Option<Weights>,
    dims: Option<ModelDims>,
    online: OnlineConfig,
    opt: Option<AdamState>,
    history: VecDeque<WindowEntry>,
    since_refine: usize,
    refinements: u64,
    memo: HashMap<(usize, usize), TokenState>,
    flag_memo: [Option<TokenState>; 2],
}

impl AddressPredictor {
    /// A predictor with no weights. It errors on prediction until online
    /// training has built a model.
    pub fn untrained(online: OnlineConfig, dims: Option<ModelDims>) -> Self {
        AddressPredictor {
            weights: None,
            dims,
            online,
            opt: None,
            history: VecDeque::new(),
            since_refine: 0,
            refinements: 0,
            memo: HashMap::new(),
            flag_memo: [None, None],
        }
    }

    pub fn from_weights(weights: Weights, online: OnlineConfig) -> Self {
        let mut p = Self::untrained(online, Some(weights.model.dims));
        p.weights = Some(weights);
        p
    }

    pub fn weights(&self) -> Option<&Weights> {
        self.weights.as_ref()
    }

    pub fn is_initialized(&self) -> bool {
        self.weights.is_some()
    }

    pub fn refinements(&self) -> u64 {
        self.refinements
    }

    pub fn seq_len(&self) -> usize {
        self.weights.as_ref().map_or(16, |w| w.model.dims.seq_len)
    }

    fn clear_memo(&mut self) {
        self.memo.clear();
        self.flag_memo = [None, None];
    }

    fn token_state(&mut self, pc: usize, delta: usize) -> TokenState {
        let w = self.weights.as_ref().unwrap();
        self.memo
            .entry((pc, delta))
            .or_insert_with(|| {
                let e = w.model.dims.emb_dim;
                let mut xe = Array2::zeros((1, 2 * e));
                xe.slice_mut(ndarray::s![0, ..e]).assign(&w.model.params.e_pc.row(pc));
                xe.slice_mut(ndarray::s![0, e..]).assign(&w.model.params.e_delta.row(delta));
                let h = w.model.fuse(xe.view()).row(0).to_owned();
                let b = &w.model.params.blocks[0];
                TokenState { k: b.wk.dot(&h), v: b.wv.dot(&h), h }
            })
            .clone()
    }

    fn flag_state(&mut self, flag: bool) -> TokenState {
        let w = self.weights.as_ref().unwrap();
        self.flag_memo[flag as usize]
            .get_or_insert_with(|| {
                let h = w.model.params.flag.row(flag as usize).to_owned();
                let b = &w.model.params.blocks[0];
                TokenState { k: b.wk.dot(&h), v: b.wv.dot(&h), h }
            })
            .clone()
    }

    /// Class distribution for one token sequence.
    pub fn distribution(&mut self, pcs: &[usize], deltas: &[usize], flag: bool) -> Result<Array1<f64>, PredictError> {
        let w = self.weights.as_ref().ok_or(PredictError::Uninitialized)?;
        let d = w.model.dims;
        if d.depth != 1 {
            let mut b = Batch::default();
            b.push(pcs, deltas, flag);
            return Ok(w.model.forward(&b).probs.row(0).to_owned());
        }
        let t = d.seq_len;
        let mut keys = Array2::zeros((t + 1, d.attn_dim));
        let mut vals = Array2::zeros((t + 1, d.attn_dim));
        let mut last_h = Array1::zeros(d.model_dim);
        for i in 0..t {
            let s = self.token_state(pcs[i], deltas[i]);
            keys.row_mut(i).assign(&s.k);
            vals.row_mut(i).assign(&s.v);
            if i + 1 == t {
                last_h = s.h;
            }
        }
        let f = self.flag_state(flag);
        keys.row_mut(t).assign(&f.k);
        vals.row_mut(t).assign(&f.v);
        let w = self.weights.as_ref().unwrap();
        let b = &w.model.params.blocks[0];
        keys += &b.pk;
        let q = b.wq.dot(&last_h);
        let mut scores = keys.dot(&q) / (d.attn_dim as f64).sqrt();
        softmax(&mut scores);
        let o = scores.dot(&vals);
        let z = &last_h + &b.wo.dot(&o);
        let g = (b.w1.dot(&z) + b.b1.row(0)).mapv(|x| x.max(0.0));
        let y = &z + &b.w2.dot(&g) + b.b2.row(0);
        let mut logits = w.model.params.w_out.dot(&y) + w.model.params.b_out.row(0);
        softmax(&mut logits);
        Ok(logits)
    }

    fn tokens_of(&self, window: &SlidingWindow) -> Option<(Vec<usize>, Vec<usize>)> {
        let w = self.weights.as_ref()?;
        let t = w.model.dims.seq_len;
        if window.len() <= t || window.is_degenerate() {
            return None;
        }
        let tail: Vec<WindowEntry> = window.iter().skip(window.len() - t - 1).copied().collect();
        Some(encode_tokens(&tail, &w.vocab, &w.model.dims, w.use_pc))
    }

    /// The `top_k` most probable next deltas applied to the last line.
    /// Out-of-vocabulary and zero deltas are dropped.
    pub fn predict_addresses(&mut self, window: &SlidingWindow, flag: bool, top_k: usize) -> Result<Vec<u64>, PredictError> {
        if self.weights.is_none() {
            return Err(PredictError::Uninitialized);
        }
        if top_k == 0 {
            return Ok(Vec::new());
        }
        let Some((pcs, deltas)) = self.tokens_of(window) else { return Ok(Vec::new()) };
        let probs = self.distribution(&pcs, &deltas, flag)?;
        let vocab = &self.weights.as_ref().unwrap().vocab;
        let last = window.last().unwrap().line;
        Ok(ranked(probs.view(), vocab)
            .into_iter()
            .take(top_k)
            .filter_map(|id| vocab.delta(id))
            .filter(|&d| d != 0)
            .filter_map(|d| apply(last, d))
            .collect())
    }

    /// Autoregressive prediction of the next `steps` lines of the most
    /// recent pc. Stops early on an unusable prediction.
    pub fn rollout(&mut self, window: &SlidingWindow, flag: bool, steps: usize) -> Result<Vec<u64>, PredictError> {
        if self.weights.is_none() {
            return Err(PredictError::Uninitialized);
        }
        let Some((mut pcs, mut deltas)) = self.tokens_of(window) else { return Ok(Vec::new()) };
        let mut line = window.last().unwrap().line;
        let mut flag = flag;
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let probs = self.distribution(&pcs, &deltas, flag)?;
            let vocab = &self.weights.as_ref().unwrap().vocab;
            let id = ranked(probs.view(), vocab)[0];
            let Some(d) = vocab.delta(id).filter(|&d| d != 0) else { break };
            let Some(next) = apply(line, d) else { break };
            out.push(next);
            line = next;
            let last_pc = *pcs.last().unwrap();
            pcs.remove(0);
            pcs.push(last_pc);
            deltas.remove(0);
            deltas.push(id);
            flag = false;
        }
        Ok(out)
    }

    /// Records an observed access for online refinement.
    pub fn record(&mut self, e: WindowEntry) {
        if self.online.interval == 0 {
            return;
        }
        if self.history.back().is_some_and(|b| b.line == e.line) {
            return;
        }
        let cap = self.online.warmup.max(4 * (self.online.batch + self.seq_len() + 1)).max(1024);
        if self.history.len() == cap {
            self.history.pop_front();
        }
        self.history.push_back(e);
        self.since_refine += 1;
        if self.weights.is_none() {
            if self.history.len() >= self.online.warmup {
                self.bootstrap();
            }
        } else if self.since_refine >= self.online.interval {
            self.refine();
        }
    }

    fn bootstrap(&mut self) {
        let stream: Vec<WindowEntry> = self.history.iter().copied().collect();
        let vocab = vocab_for(&[stream], DEFAULT_VOCAB);
        let mut dims = self.dims.unwrap_or_else(|| ModelDims::standard(vocab.classes()));
        dims.vocab = vocab.classes();
        let model = AddressModel::new(dims, self.online.seed);
        self.weights = Some(Weights { model, vocab, use_pc: true });
        self.refine();
    }

    /// One optimizer step on the most recent samples with known targets.
    fn refine(&mut self) {
        self.since_refine = 0;
        let w = self.weights.as_mut().unwrap();
        let t = w.model.dims.seq_len;
        let need = self.online.batch + t + 1;
        let start = self.history.len().saturating_sub(need * 2);
        let recent: Vec<WindowEntry> = self.history.iter().skip(start).copied().collect();
        let samples = build_samples(&recent, &w.vocab, &w.model.dims, w.use_pc);
        if samples.is_empty() {
            return;
        }
        let take = samples.len().min(self.online.batch);
        let batch: Vec<&Sample> = samples[samples.len() - take..].iter().collect();
        let (loss, grad, _) = super::train::batch_gradient(&w.model, &batch);
        if !loss.is_finite() {
            return;
        }
        let opt = self
            .opt
            .get_or_insert_with(|| AdamState::new(Adam { lr: self.online.lr, ..Adam::default() }, &w.model.params));
        opt.step(&mut w.model.params, grad);
        self.refinements += 1;
        self.clear_memo();
    }
}

/// Class ids by descending probability; equal probabilities rank the lower
/// delta first and OOV last.
fn ranked(probs: ArrayView1<f64>, vocab: &DeltaVocab) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..probs.len()).collect();
    let key = |id: usize| vocab.delta(id).unwrap_or(i64::MAX);
    ids.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(key(a).cmp(&key(b))));
    ids
}

fn apply(line: u64, delta: i64) -> Option<u64> {
    let off = delta.checked_mul(LINE_BYTES as i64)?;
    line.checked_add_signed(off)
}

fn softmax(x: &mut Array1<f64>) {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    x.mapv_inplace(|v| (v - m).exp());
    let s = x.sum();
    x.mapv_inplace(|v| v / s);
}

/// Bucket of a raw pc under `weights`.
pub fn bucket_for(weights: &Weights, pc: u64) -> usize {
    if weights.use_pc {
        pc_bucket(pc, weights.model.dims.pc_buckets)
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefetch::train::{train_predictor, TrainConfig};
    use crate::trace::{gen_strided, StridedParams};

    fn small_dims() -> ModelDims {
        ModelDims { seq_len: 4, pc_buckets: 8, vocab: 0, emb_dim: 8, model_dim: 16, attn_dim: 8, ffn_dim: 16, depth: 1 }
    }

    fn window(lines: impl IntoIterator<Item = u64>) -> SlidingWindow {
        SlidingWindow::from_entries(
            64,
            lines.into_iter().enumerate().map(|(i, l)| WindowEntry { pc: 9, line: l * 64, arrival_cycle: i as u64, is_read: true }),
        )
    }

    fn stride_predictor() -> AddressPredictor {
        let t = gen_strided(&StridedParams::new(128, 400, 0, 9)).unwrap();
        let out = train_predictor(&[t], &TrainConfig { dims: Some(small_dims()), ..TrainConfig::new(3, 5e-3, 1) }).unwrap();
        AddressPredictor::from_weights(out.weights, OnlineConfig { interval: 0, ..OnlineConfig::default() })
    }

    #[test]
    fn memoized_inference_matches_batch_forward() {
        let mut p = stride_predictor();
        let w = p.weights().unwrap().clone();
        let (pcs, ds) = (vec![1, 2, 3, 1], vec![0, 1, 0, 1]);
        for flag in [false, true] {
            let fast = p.distribution(&pcs, &ds, flag).unwrap();
            let mut b = Batch::default();
            b.push(&pcs, &ds, flag);
            let slow = w.model.forward(&b).probs.row(0).to_owned();
            assert!(fast.iter().zip(slow.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn uninitialized_is_an_error() {
        let mut p = AddressPredictor::untrained(OnlineConfig::default(), None);
        assert_eq!(p.predict_addresses(&window(0..20), false, 1), Err(PredictError::Uninitialized));
    }

    #[test]
    fn top_k_zero_and_degenerate_windows() {
        let mut p = stride_predictor();
        assert_eq!(p.predict_addresses(&window((0..20).map(|i| i * 2)), false, 0), Ok(vec![]));
        assert_eq!(p.predict_addresses(&window([5; 20]), false, 3), Ok(vec![]));
    }

    #[test]
    fn stride_rollout() {
        let mut p = stride_predictor();
        let w = window((0..20).map(|i| i * 2));
        assert_eq!(p.predict_addresses(&w, false, 1).unwrap(), vec![40 * 64]);
        assert_eq!(p.rollout(&w, false, 3).unwrap(), vec![40 * 64, 42 * 64, 44 * 64]);
    }

    #[test]
    fn online_training_bootstraps_a_model() {
        let online = OnlineConfig { interval: 64, batch: 16, lr: 5e-3, warmup: 128, seed: 2 };
        let mut p = AddressPredictor::untrained(online, Some(small_dims()));
        for i in 0..400u64 {
            p.record(WindowEntry { pc: 3, line: i * 64, arrival_cycle: i, is_read: true });
        }
        assert!(p.is_initialized());
        assert!(p.refinements() >= 4);
    }

    #[test]
    fn ranking_breaks_ties_by_lower_delta() {
        let vocab = DeltaVocab::from_deltas(vec![5, -2, 3]);
        let probs = Array1::from(vec![0.25, 0.25, 0.25, 0.25]);
        assert_eq!(ranked(probs.view(), &vocab), vec![1, 2, 0, 3]);
    }
}
