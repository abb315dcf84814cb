//! Weight file: magic "XPWT", little-endian, row-major f32 tensors.

use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::model::{AddressModel, ModelDims, Params};
use super::vocab::DeltaVocab;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"XPWT";
pub const WEIGHTS_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("weight file version {0} is not supported")]
    Version(u16),
    #[error("invalid dimensions: {0}")]
    Dims(String),
    #[error("tensor {index} has shape {found:?}, expected {expected:?}")]
    Shape { index: usize, expected: (usize, usize), found: (usize, usize) },
    #[error("vocabulary has {found} deltas but the model has {expected} classes")]
    Vocab { expected: usize, found: usize },
    #[error("weight file truncated")]
    Truncated,
    #[error("trailing bytes after the last tensor")]
    Trailing,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A trained predictor: model parameters plus the delta vocabulary and
/// whether the pc modality was used.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub model: AddressModel,
    pub vocab: DeltaVocab,
    pub use_pc: bool,
}

fn put_u32(w: &mut impl Write, v: usize) -> io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], WeightsError> {
        if self.buf.len() < N {
            return Err(WeightsError::Truncated);
        }
        let (head, rest) = self.buf.split_at(N);
        self.buf = rest;
        Ok(head.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<usize, WeightsError> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }
}

impl Weights {
    pub fn write(&self, w: &mut impl Write) -> io::Result<()> {
        let d = &self.model.dims;
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        w.write_all(&[self.use_pc as u8, 0])?;
        for v in [d.seq_len, d.pc_buckets, d.vocab, d.emb_dim, d.model_dim, d.attn_dim, d.ffn_dim, d.depth] {
            put_u32(w, v)?;
        }
        put_u32(w, self.vocab.len())?;
        for &delta in self.vocab.deltas() {
            w.write_all(&delta.to_le_bytes())?;
        }
        let tensors = self.model.params.tensors();
        put_u32(w, tensors.len())?;
        for t in tensors {
            put_u32(w, t.nrows())?;
            put_u32(w, t.ncols())?;
            for &v in t.iter() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        let mut r = Reader { buf: bytes };
        if &r.take::<4>()? != WEIGHTS_MAGIC {
            return Err(WeightsError::BadMagic);
        }
        let version = u16::from_le_bytes(r.take()?);
        if version != WEIGHTS_VERSION {
            return Err(WeightsError::Version(version));
        }
        let [use_pc, _] = r.take::<2>()?;
        let mut f = [0usize; 8];
        for v in &mut f {
            *v = r.u32()?;
        }
        let dims = ModelDims {
            seq_len: f[0],
            pc_buckets: f[1],
            vocab: f[2],
            emb_dim: f[3],
            model_dim: f[4],
            attn_dim: f[5],
            ffn_dim: f[6],
            depth: f[7],
        };
        dims.validate().map_err(WeightsError::Dims)?;
        let n = r.u32()?;
        if n + 1 != dims.vocab {
            return Err(WeightsError::Vocab { expected: dims.vocab, found: n });
        }
        let mut deltas = Vec::with_capacity(n);
        for _ in 0..n {
            deltas.push(i64::from_le_bytes(r.take()?));
        }
        let mut model = AddressModel { dims, params: Params::init(&dims, 0) };
        let count = r.u32()?;
        let mut tensors = model.params.tensors_mut();
        if count != tensors.len() {
            return Err(WeightsError::Dims(format!("{count} tensors, expected {}", tensors.len())));
        }
        for (index, t) in tensors.iter_mut().enumerate() {
            let shape = (r.u32()?, r.u32()?);
            if shape != t.dim() {
                return Err(WeightsError::Shape { index, expected: t.dim(), found: shape });
            }
            let mut data = Vec::with_capacity(shape.0 * shape.1);
            for _ in 0..shape.0 * shape.1 {
                data.push(f32::from_le_bytes(r.take()?) as f64);
            }
            **t = Array2::from_shape_vec(shape, data).unwrap();
        }
        if !r.buf.is_empty() {
            return Err(WeightsError::Trailing);
        }
        Ok(Weights { model, vocab: DeltaVocab::from_deltas(deltas), use_pc: use_pc != 0 })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WeightsError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WeightsError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
