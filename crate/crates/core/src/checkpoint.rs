//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "EDIF1" | version u32
//! config: embed_dim num_layers num_heads ffn_dim max_t vocab_size
//!         cond_vocab_size max_seq_len (u64 each) | dropout f64 | seed u64
//! meta:   epochs u64 | train_seed u64 | corpus_hash str | vocab_fingerprint u64
//!         | steps u64 | weights 3 x f64
//! params: count u32, then per block: name str | rows u64 | cols u64
//!         | len u64 | len x f64
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::path::Path;

use crate::edit::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{DenoiserModel, ModelConfig};

pub const MAGIC: &[u8; 5] = b"EDIF1";
pub const VERSION: u32 = 1;

/// Provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub epochs: u64,
    pub train_seed: u64,
    pub corpus_hash: String,
    pub vocab_fingerprint: u64,
    pub steps: usize,
    pub weights: (f64, f64, f64),
}

impl CheckpointMeta {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::with_weights(self.steps, self.weights)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub meta: CheckpointMeta,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size field overflows".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non UTF-8 string".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let c = self.model.config();
        for v in [
            c.embed_dim,
            c.num_layers,
            c.num_heads,
            c.ffn_dim,
            c.max_t,
            c.vocab_size,
            c.cond_vocab_size,
            c.max_seq_len,
        ] {
            w.u64(v as u64);
        }
        w.f64(c.dropout);
        w.u64(c.seed);
        let m = &self.meta;
        w.u64(m.epochs);
        w.u64(m.train_seed);
        w.str(&m.corpus_hash);
        w.u64(m.vocab_fingerprint);
        w.u64(m.steps as u64);
        w.f64(m.weights.0);
        w.f64(m.weights.1);
        w.f64(m.weights.2);
        let params = self.model.params();
        w.u32(params.len() as u32);
        for p in params.iter() {
            w.str(&p.name);
            w.u64(p.value.rows() as u64);
            w.u64(p.value.cols() as u64);
            w.u64(p.value.data().len() as u64);
            for &x in p.value.data() {
                w.f64(x);
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let config = ModelConfig {
            embed_dim: r.usize()?,
            num_layers: r.usize()?,
            num_heads: r.usize()?,
            ffn_dim: r.usize()?,
            max_t: r.usize()?,
            vocab_size: r.usize()?,
            cond_vocab_size: r.usize()?,
            max_seq_len: r.usize()?,
            dropout: r.f64()?,
            seed: r.u64()?,
        };
        let meta = CheckpointMeta {
            epochs: r.u64()?,
            train_seed: r.u64()?,
            corpus_hash: r.str()?,
            vocab_fingerprint: r.u64()?,
            steps: r.usize()?,
            weights: (r.f64()?, r.f64()?, r.f64()?),
        };
        let mut model = DenoiserModel::new(config).map_err(|e| Error::Format(format!("bad config block: {e}")))?;
        let count = r.u32()? as usize;
        if count != model.params().len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} parameter blocks, model has {}",
                model.params().len()
            )));
        }
        for p in model.params_mut().iter_mut() {
            let name = r.str()?;
            let (rows, cols, len) = (r.usize()?, r.usize()?, r.usize()?);
            if name != p.name || [rows, cols] != p.value.shape() || len != rows * cols {
                return Err(Error::Format(format!(
                    "parameter block `{name}` [{rows}x{cols}] does not match `{}` {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            for x in p.value.data_mut() {
                *x = r.f64()?;
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { model, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
