//! Two-modality attention model over (pc, delta) tokens that scores the
//! next pc-local line delta. Computation is f64 throughout.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub seq_len: usize,
    pub pc_buckets: usize,
    /// Output classes, OOV included.
    pub vocab: usize,
    /// Width of each modality embedding.
    pub emb_dim: usize,
    /// Fusion and transformer width.
    pub model_dim: usize,
    pub attn_dim: usize,
    pub ffn_dim: usize,
    pub depth: usize,
}

impl ModelDims {
    pub fn standard(vocab: usize) -> Self {
        ModelDims {
            seq_len: 16,
            pc_buckets: 256,
            vocab,
            emb_dim: 64,
            model_dim: 128,
            attn_dim: 64,
            ffn_dim: 128,
            depth: 1,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("seq_len", self.seq_len),
            ("pc_buckets", self.pc_buckets),
            ("vocab", self.vocab),
            ("emb_dim", self.emb_dim),
            ("model_dim", self.model_dim),
            ("attn_dim", self.attn_dim),
            ("ffn_dim", self.ffn_dim),
            ("depth", self.depth),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(format!("model dimension `{name}` must be positive")),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    /// Learned per-position bias added to keys; the last row is the flag token.
    pub pk: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub e_pc: Array2<f64>,
    pub e_delta: Array2<f64>,
    pub w_f: Array2<f64>,
    pub b_f: Array2<f64>,
    pub flag: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub w_out: Array2<f64>,
    pub b_out: Array2<f64>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

impl Params {
    pub fn init(d: &ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = d.model_dim;
        let blocks = (0..d.depth)
            .map(|_| BlockParams {
                wq: xavier(&mut rng, d.attn_dim, m),
                wk: xavier(&mut rng, d.attn_dim, m),
                wv: xavier(&mut rng, d.attn_dim, m),
                pk: Array2::zeros((d.seq_len + 1, d.attn_dim)),
                wo: xavier(&mut rng, m, d.attn_dim),
                w1: xavier(&mut rng, d.ffn_dim, m),
                b1: Array2::zeros((1, d.ffn_dim)),
                w2: xavier(&mut rng, m, d.ffn_dim),
                b2: Array2::zeros((1, m)),
            })
            .collect();
        Params {
            e_pc: xavier(&mut rng, d.pc_buckets, d.emb_dim),
            e_delta: xavier(&mut rng, d.vocab, d.emb_dim),
            w_f: xavier(&mut rng, m, 2 * d.emb_dim),
            b_f: Array2::zeros((1, m)),
            flag: xavier(&mut rng, 2, m),
            blocks,
            w_out: xavier(&mut rng, d.vocab, m),
            b_out: Array2::zeros((1, d.vocab)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every tensor in a fixed order, shared by the optimizer and the
    /// weight file.
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![&self.e_pc, &self.e_delta, &self.w_f, &self.b_f, &self.flag];
        for b in &self.blocks {
            v.extend([&b.wq, &b.wk, &b.wv, &b.pk, &b.wo, &b.w1, &b.b1, &b.w2, &b.b2]);
        }
        v.extend([&self.w_out, &self.b_out]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = vec![&mut self.e_pc, &mut self.e_delta, &mut self.w_f, &mut self.b_f, &mut self.flag];
        for b in &mut self.blocks {
            v.extend([&mut b.wq, &mut b.wk, &mut b.wv, &mut b.pk, &mut b.wo, &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2]);
        }
        v.extend([&mut self.w_out, &mut self.b_out]);
        v
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Token ids for a batch of sequences, row-major `[sample][position]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub pc: Vec<usize>,
    pub delta: Vec<usize>,
    pub flag: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.flag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flag.is_empty()
    }

    pub fn push(&mut self, pc: &[usize], delta: &[usize], flag: bool) {
        self.pc.extend_from_slice(pc);
        self.delta.extend_from_slice(delta);
        self.flag.push(flag as usize);
    }
}

struct BlockCache {
    tok: Array2<f64>,
    hq: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
    o: Array2<f64>,
    z: Array2<f64>,
    g: Array2<f64>,
    fh: Array2<f64>,
}

pub struct Forward {
    xe: Array2<f64>,
    h0: Array2<f64>,
    blocks: Vec<BlockCache>,
    y: Array2<f64>,
    /// Softmax output, one row per sample.
    pub probs: Array2<f64>,
}

fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

fn add_row(x: &mut Array2<f64>, b: &Array2<f64>) {
    *x += &b.row(0);
}

/// Self-attention block. `all_queries` makes every sequence position a
/// query; otherwise only the last position is computed.
fn block_forward(
    p: &BlockParams,
    d: &ModelDims,
    h: &Array2<f64>,
    flags: &Array2<f64>,
    all_queries: bool,
) -> (Array2<f64>, BlockCache) {
    let t = d.seq_len;
    let b = flags.nrows();
    let nq = if all_queries { t } else { 1 };
    let m = d.model_dim;
    let mut tok = Array2::zeros((b * (t + 1), m));
    let mut hq = Array2::zeros((b * nq, m));
    for i in 0..b {
        tok.slice_mut(s![i * (t + 1)..i * (t + 1) + t, ..]).assign(&h.slice(s![i * t..(i + 1) * t, ..]));
        tok.row_mut(i * (t + 1) + t).assign(&flags.row(i));
        if all_queries {
            hq.slice_mut(s![i * t..(i + 1) * t, ..]).assign(&h.slice(s![i * t..(i + 1) * t, ..]));
        } else {
            hq.row_mut(i).assign(&h.row(i * t + t - 1));
        }
    }
    let mut k = tok.dot(&p.wk.t());
    for i in 0..b {
        let mut ks = k.slice_mut(s![i * (t + 1)..(i + 1) * (t + 1), ..]);
        ks += &p.pk;
    }
    let v = tok.dot(&p.wv.t());
    let q = hq.dot(&p.wq.t());
    let scale = 1.0 / (d.attn_dim as f64).sqrt();
    let mut a = Array2::zeros((b * nq, t + 1));
    let mut o = Array2::zeros((b * nq, d.attn_dim));
    for i in 0..b {
        let qi = q.slice(s![i * nq..(i + 1) * nq, ..]);
        let ki = k.slice(s![i * (t + 1)..(i + 1) * (t + 1), ..]);
        let vi = v.slice(s![i * (t + 1)..(i + 1) * (t + 1), ..]);
        let mut si = qi.dot(&ki.t()) * scale;
        softmax_rows(&mut si);
        o.slice_mut(s![i * nq..(i + 1) * nq, ..]).assign(&si.dot(&vi));
        a.slice_mut(s![i * nq..(i + 1) * nq, ..]).assign(&si);
    }
    let z = &hq + &o.dot(&p.wo.t());
    let mut g = z.dot(&p.w1.t());
    add_row(&mut g, &p.b1);
    let fh = g.mapv(|x| x.max(0.0));
    let mut y = &z + &fh.dot(&p.w2.t());
    add_row(&mut y, &p.b2);
    (y, BlockCache { tok, hq, q, k, v, a, o, z, g, fh })
}

/// Returns gradients with respect to the sequence rows and the flag rows.
fn block_backward(
    p: &BlockParams,
    gp: &mut BlockParams,
    d: &ModelDims,
    c: &BlockCache,
    dy: &Array2<f64>,
    all_queries: bool,
) -> (Array2<f64>, Array2<f64>) {
    let t = d.seq_len;
    let nq = if all_queries { t } else { 1 };
    let b = dy.nrows() / nq;
    let scale = 1.0 / (d.attn_dim as f64).sqrt();

    let dfh = dy.dot(&p.w2);
    gp.w2 += &dy.t().dot(&c.fh);
    gp.b2 += &dy.sum_axis(Axis(0));
    let mut dg = dfh;
    dg.zip_mut_with(&c.g, |x, &g| {
        if g <= 0.0 {
            *x = 0.0
        }
    });
    gp.w1 += &dg.t().dot(&c.z);
    gp.b1 += &dg.sum_axis(Axis(0));
    let dz = dy + &dg.dot(&p.w1);
    let do_ = dz.dot(&p.wo);
    gp.wo += &dz.t().dot(&c.o);
    let mut dhq = dz;

    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for i in 0..b {
        let qr = i * nq..(i + 1) * nq;
        let kr = i * (t + 1)..(i + 1) * (t + 1);
        let ai = c.a.slice(s![qr.clone(), ..]);
        let doi = do_.slice(s![qr.clone(), ..]);
        let da = doi.dot(&c.v.slice(s![kr.clone(), ..]).t());
        dv.slice_mut(s![kr.clone(), ..]).assign(&ai.t().dot(&doi));
        let mut ds = &da * &ai;
        let rs = ds.sum_axis(Axis(1));
        for (mut row, (arow, r)) in ds.rows_mut().into_iter().zip(ai.rows().into_iter().zip(rs.iter())) {
            row.zip_mut_with(&arow, |x, &a| *x -= a * r);
        }
        ds.mapv_inplace(|x| x * scale);
        dq.slice_mut(s![qr.clone(), ..]).assign(&ds.dot(&c.k.slice(s![kr.clone(), ..])));
        let dki = ds.t().dot(&c.q.slice(s![qr, ..]));
        gp.pk += &dki;
        dk.slice_mut(s![kr, ..]).assign(&dki);
    }
    gp.wk += &dk.t().dot(&c.tok);
    gp.wv += &dv.t().dot(&c.tok);
    gp.wq += &dq.t().dot(&c.hq);
    let dtok = dk.dot(&p.wk) + dv.dot(&p.wv);
    dhq += &dq.dot(&p.wq);

    let m = d.model_dim;
    let mut dh = Array2::zeros((b * t, m));
    let mut dflag = Array2::zeros((b, m));
    for i in 0..b {
        dh.slice_mut(s![i * t..(i + 1) * t, ..]).assign(&dtok.slice(s![i * (t + 1)..i * (t + 1) + t, ..]));
        dflag.row_mut(i).assign(&dtok.row(i * (t + 1) + t));
        if all_queries {
            let mut rows = dh.slice_mut(s![i * t..(i + 1) * t, ..]);
            rows += &dhq.slice(s![i * t..(i + 1) * t, ..]);
        } else {
            let mut row = dh.row_mut(i * t + t - 1);
            row += &dhq.row(i);
        }
    }
    (dh, dflag)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AddressModel {
    pub dims: ModelDims,
    pub params: Params,
}

impl AddressModel {
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        dims.validate().expect("valid model dims");
        AddressModel { dims, params: Params::init(&dims, seed) }
    }

    fn embed_tokens(&self, pc: &[usize], delta: &[usize]) -> Array2<f64> {
        let e = self.dims.emb_dim;
        let mut xe = Array2::zeros((pc.len(), 2 * e));
        for (r, (&p, &dl)) in pc.iter().zip(delta).enumerate() {
            xe.slice_mut(s![r, ..e]).assign(&self.params.e_pc.row(p));
            xe.slice_mut(s![r, e..]).assign(&self.params.e_delta.row(dl));
        }
        xe
    }

    /// Fused per-token representation.
    pub fn fuse(&self, xe: ArrayView2<f64>) -> Array2<f64> {
        let mut h = xe.dot(&self.params.w_f.t());
        add_row(&mut h, &self.params.b_f);
        h.mapv_inplace(f64::tanh);
        h
    }

    pub fn forward(&self, batch: &Batch) -> Forward {
        let d = &self.dims;
        assert_eq!(batch.pc.len(), batch.len() * d.seq_len, "batch token count");
        let xe = self.embed_tokens(&batch.pc, &batch.delta);
        let h0 = self.fuse(xe.view());
        let mut flags = Array2::zeros((batch.len(), d.model_dim));
        for (i, &f) in batch.flag.iter().enumerate() {
            flags.row_mut(i).assign(&self.params.flag.row(f));
        }
        let mut h = h0.clone();
        let mut caches = Vec::with_capacity(d.depth);
        for (l, bp) in self.params.blocks.iter().enumerate() {
            let last = l + 1 == d.depth;
            let (y, c) = block_forward(bp, d, &h, &flags, !last);
            caches.push(c);
            h = y;
        }
        let mut logits = h.dot(&self.params.w_out.t());
        add_row(&mut logits, &self.params.b_out);
        softmax_rows(&mut logits);
        Forward { xe, h0, blocks: caches, y: h, probs: logits }
    }

    /// Summed cross-entropy over the batch and its gradient.
    pub fn loss_and_grad(&self, batch: &Batch, targets: &[usize]) -> (f64, Params, Forward) {
        let d = &self.dims;
        let fw = self.forward(batch);
        let mut g = self.params.zeros_like();
        let mut loss = 0.0;
        let mut dlogits = fw.probs.clone();
        for (i, &t) in targets.iter().enumerate() {
            loss -= fw.probs[[i, t]].max(1e-300).ln();
            dlogits[[i, t]] -= 1.0;
        }
        g.w_out += &dlogits.t().dot(&fw.y);
        g.b_out += &dlogits.sum_axis(Axis(0));
        let mut dh = dlogits.dot(&self.params.w_out);
        let mut dflags: Array2<f64> = Array2::zeros((batch.len(), d.model_dim));
        for l in (0..d.depth).rev() {
            let last = l + 1 == d.depth;
            let (dprev, df) =
                block_backward(&self.params.blocks[l], &mut g.blocks[l], d, &fw.blocks[l], &dh, !last);
            dflags += &df;
            dh = dprev;
        }
        for (i, &f) in batch.flag.iter().enumerate() {
            let mut row = g.flag.row_mut(f);
            row += &dflags.row(i);
        }
        let mut dpre = dh;
        dpre.zip_mut_with(&fw.h0, |x, &h| *x *= 1.0 - h * h);
        g.w_f += &dpre.t().dot(&fw.xe);
        g.b_f += &dpre.sum_axis(Axis(0));
        let dxe = dpre.dot(&self.params.w_f);
        let e = d.emb_dim;
        for (r, (&p, &dl)) in batch.pc.iter().zip(&batch.delta).enumerate() {
            let mut rp = g.e_pc.row_mut(p);
            rp += &dxe.slice(s![r, ..e]);
            let mut rd = g.e_delta.row_mut(dl);
            rd += &dxe.slice(s![r, e..]);
        }
        (loss, g, fw)
    }
}
