//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TBLXCKPT" | u32 version
//! str run config | str model config | str vocabulary | u64 step
//! 5 x tensor map: params, buffers, adam m, adam v, lookahead slow
//! ```
//!
//! A `str` is a u64 byte length plus UTF-8. A tensor map is a u64 count, then
//! per tensor its name, u64 rank, u64 dims and u64 length followed by f32 data.

use std::fs;
use std::path::Path;

use tablatex_core::model::tensor::{Tensor, TensorMap};
use tablatex_core::model::{Model, ModelConfig};
use tablatex_core::optim::OptimState;
use tablatex_core::train::Trainer;
use tablatex_core::Vocabulary;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats;

pub const MAGIC: &[u8; 8] = b"TBLXCKPT";
pub const VERSION: u32 = 1;

/// A loaded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub trainer: Trainer,
}

fn model_text(c: &ModelConfig) -> String {
    c.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn to_bytes(config: &RunConfig, vocab: &Vocabulary, trainer: &Trainer) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.str(&config.to_text());
    w.str(&model_text(&trainer.model.config));
    w.str(&formats::vocab_to_string(vocab));
    w.u64(trainer.optim.t);
    for map in [&trainer.model.params, &trainer.model.buffers, &trainer.optim.m, &trainer.optim.v, &trainer.optim.slow] {
        w.map(map);
    }
    w.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let config = RunConfig::from_text(&r.str()?)?;
    let model_pairs = crate::config::parse_pairs(&r.str()?)?;
    let stored_model = ModelConfig::from_pairs(model_pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let vocab = formats::vocab_from_str(&r.str()?, config.task, config.max_seq_len)?;
    let model_config = config.model_config(vocab.len());
    if stored_model != model_config {
        return Err(Error::Data("checkpoint model config disagrees with its run config and vocabulary".into()));
    }
    let t = r.u64()?;
    let params = r.map()?;
    let buffers = r.map()?;
    let (m, v, slow) = (r.map()?, r.map()?, r.map()?);
    if r.pos != bytes.len() {
        return Err(Error::Data("trailing bytes after checkpoint".into()));
    }
    let model = Model { config: model_config, params, buffers };
    model.check_layout()?;
    let optim = OptimState { t, m, v, slow };
    optim.check_against(&model.params)?;
    let trainer = Trainer { model, optim, optim_config: config.optim.clone() };
    Ok(Checkpoint { config, vocab, trainer })
}

pub fn save(path: &Path, config: &RunConfig, vocab: &Vocabulary, trainer: &Trainer) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, to_bytes(config, vocab, trainer)).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Fails unless `requested` describes the same architecture as the checkpoint.
pub fn ensure_same_model(ckpt: &Checkpoint, requested: &RunConfig) -> Result<()> {
    let want = requested.model_config(ckpt.vocab.len());
    if want != ckpt.trainer.model.config {
        let have = ckpt.trainer.model.config.to_pairs();
        let diff: Vec<String> = want
            .to_pairs()
            .into_iter()
            .zip(have)
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{} {} != {}", a.0, a.1, b.1))
            .collect();
        return Err(Error::Data(format!("config does not match checkpoint: {}", diff.join(", "))));
    }
    Ok(())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn map(&mut self, m: &TensorMap<f32>) {
        self.u64(m.len() as u64);
        for (name, t) in m {
            self.str(name);
            self.u64(t.shape.len() as u64);
            for &d in &t.shape {
                self.u64(d as u64);
            }
            self.u64(t.data.len() as u64);
            for v in &t.data {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Data("length overflows".into()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Data("invalid UTF-8 in checkpoint".into()))
    }

    fn map(&mut self) -> Result<TensorMap<f32>> {
        let mut m = TensorMap::new();
        for _ in 0..self.len()? {
            let name = self.str()?;
            let rank = self.len()?;
            let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
            let n = self.len()?;
            if shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)) != Some(n) {
                return Err(Error::Data(format!("tensor {name}: shape does not match length")));
            }
            let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Data("length overflows".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if m.insert(name.clone(), Tensor { shape, data }).is_some() {
                return Err(Error::Data(format!("duplicate tensor {name}")));
            }
        }
        Ok(m)
    }
}
