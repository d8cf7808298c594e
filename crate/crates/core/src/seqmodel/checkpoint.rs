//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "SLOWDYN\0"
//! version    u32       currently 1
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! n_tensors  u32
//! tensor*    name_len u32, name (UTF-8), ndim u32, dims u64 * ndim,
//!            data f64 * prod(dims) in row-major order
//! ```
//!
//! Tensors appear in the model's parameter order, followed by the Adam
//! first moments (`adam.m.<name>`), second moments (`adam.v.<name>`) and,
//! for a stateful LSTM checkpointed mid-epoch, the carried state
//! (`carry.h`, `carry.c`).

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::lstm::{LstmParams, LstmState};
use super::optim::Adam;
use super::train::{LossRecord, TrainConfig};
use super::transformer::TransformerParams;
use super::{Model, ModelConfig, ModelParams, ParamTensors, Vocab};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SLOWDYN\0";
pub const VERSION: u32 = 1;

/// Everything except tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub vocab: Vocab,
    /// Frame interval of the training trajectories (ps).
    pub dt: f64,
    /// SHA-256 of the training configuration JSON.
    pub config_hash: String,
    /// SHA-256 of the tokenized training data.
    pub data_hash: String,
    /// Optimizer updates applied.
    pub step: u64,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub epoch_loss_sum: f64,
    pub epoch_loss_count: usize,
    /// Base seed of every training random stream; streams are derived from
    /// it and the step / epoch counters, so no generator state is stored.
    pub rng_seed: u64,
    pub history: Vec<LossRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    pub adam: Adam,
    pub carry: Option<LstmState>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f64>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, ArrayD<f64>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = self.take(len.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|_| corrupt("bad tensor shape"))?;
        Ok((name, arr))
    }
}

fn corrupt(msg: &str) -> Error {
    Error::InvalidInput(format!("corrupt checkpoint: {msg}"))
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model { config: self.meta.train.model.clone(), params: self.params.clone() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let named = self.params.named();
        let n = 3 * named.len() + if self.carry.is_some() { 2 } else { 0 };
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for (name, t) in &named {
            put_tensor(&mut out, name, t.shape(), t.iter().copied());
        }
        for (prefix, moments) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for ((name, _), t) in named.iter().zip(moments) {
                put_tensor(&mut out, &format!("{prefix}{name}"), t.shape(), t.iter().copied());
            }
        }
        if let Some(c) = &self.carry {
            put_tensor(&mut out, "carry.h", c.h.shape(), c.h.iter().copied());
            put_tensor(&mut out, "carry.c", c.c.shape(), c.c.iter().copied());
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            tensors.push(r.tensor()?);
        }
        if r.pos != buf.len() {
            return Err(corrupt("trailing bytes"));
        }

        let mut params = match &meta.train.model {
            ModelConfig::Lstm(c) => ModelParams::Lstm(LstmParams::zeros(c)),
            ModelConfig::Transformer(c) => ModelParams::Transformer(TransformerParams::zeros(c)),
        };
        let mut it = tensors.into_iter();
        let mut next = |expect: &str, shape: &[usize]| -> Result<ArrayD<f64>> {
            let (name, t) = it.next().ok_or_else(|| corrupt(&format!("missing tensor {expect}")))?;
            if name != expect || t.shape() != shape {
                return Err(corrupt(&format!("expected {expect} {shape:?}, found {name} {:?}", t.shape())));
            }
            Ok(t)
        };
        for (name, mut t) in params.named_mut() {
            let src = next(&name, t.shape())?;
            t.assign(&src);
        }
        let mut adam = Adam::new(&params);
        adam.step = meta.step;
        let names: Vec<(String, Vec<usize>)> =
            params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        for (idx, (name, shape)) in names.iter().enumerate() {
            adam.m[idx] = next(&format!("adam.m.{name}"), shape)?;
        }
        for (idx, (name, shape)) in names.iter().enumerate() {
            adam.v[idx] = next(&format!("adam.v.{name}"), shape)?;
        }
        let carry = if n > 3 * names.len() {
            let to2 = |t: ArrayD<f64>| -> Result<Array2<f64>> {
                t.into_dimensionality().map_err(|_| corrupt("carry state must be 2-D"))
            };
            let hsh = match &meta.train.model {
                ModelConfig::Lstm(c) => c.hidden,
                _ => return Err(corrupt("carried state on a non-recurrent model")),
            };
            let (name, h) = it_next_named(&mut it)?;
            let (name2, c) = it_next_named(&mut it)?;
            if name != "carry.h" || name2 != "carry.c" || h.shape() != c.shape() || h.shape()[1] != hsh {
                return Err(corrupt("bad carried state tensors"));
            }
            Some(LstmState { h: to2(h)?, c: to2(c)? })
        } else {
            None
        };
        Ok(Checkpoint { meta, params, adam, carry })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

fn it_next_named(it: &mut impl Iterator<Item = (String, ArrayD<f64>)>) -> Result<(String, ArrayD<f64>)> {
    it.next().ok_or_else(|| corrupt("missing carried state"))
}
