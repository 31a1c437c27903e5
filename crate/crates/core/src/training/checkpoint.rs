//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "VTSR"                       magic
//! u32                          version (1)
//! u64 + bytes                  UTF-8 JSON metadata
//! u32                          tensor count
//! per tensor:
//!   u16 + bytes                name
//!   u8                         dtype (1 = f32)
//!   u8 + ndim x u64            shape
//!   f32 x numel                payload
//! ```
//!
//! Optimizer moments, when present, are stored as extra tensors named
//! `optimizer.m.<param>` and `optimizer.v.<param>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, Stage, TrainConfig};
use crate::diffcore::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VitSr};

pub const MAGIC: &[u8; 4] = b"VTSR";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const M_PREFIX: &str = "optimizer.m.";
const V_PREFIX: &str = "optimizer.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// 0-based epoch that produced the weights; `None` before any training.
    pub epoch: Option<usize>,
    /// `None` when unknown or not finite.
    pub best_val_psnr: Option<f64>,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub optimizer_state: bool,
    pub optimizer_step: Option<u64>,
}

impl CheckpointMeta {
    pub fn untrained(stage: Stage, model: ModelConfig) -> Self {
        Self {
            stage,
            epoch: None,
            best_val_psnr: None,
            model,
            train: None,
            optimizer_state: false,
            optimizer_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
    origin: &'b Path,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.origin,
                format!("truncated: wanted {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn len(&mut self, n: u64) -> Result<usize> {
        usize::try_from(n).map_err(|_| Error::format(self.origin, "length overflows usize"))
    }
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, tensors: Vec<(String, Tensor<f32>)>) -> Self {
        Self { meta, tensors }
    }

    /// Parameters of `model`; the model config in `meta` is replaced by the
    /// model's own.
    pub fn from_model(model: &VitSr<f32>, mut meta: CheckpointMeta) -> Self {
        meta.model = model.config().clone();
        meta.optimizer_state = false;
        meta.optimizer_step = None;
        let tensors = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone().with_requires_grad(false)))
            .collect();
        Self { meta, tensors }
    }

    /// Appends the optimizer moments for `params`.
    pub fn with_optimizer(mut self, opt: &AdamW, params: &ParamSet<f32>) -> Result<Self> {
        self.tensors.retain(|(n, _)| !n.starts_with("optimizer."));
        for (prefix, moments) in [
            (M_PREFIX, opt.first_moments()),
            (V_PREFIX, opt.second_moments()),
        ] {
            for (p, m) in params.iter().zip(moments) {
                self.tensors.push((
                    format!("{prefix}{}", p.name),
                    Tensor::new(p.tensor.shape().to_vec(), m.clone())?,
                ));
            }
        }
        self.meta.optimizer_state = true;
        self.meta.optimizer_step = Some(opt.steps());
        Ok(self)
    }

    pub fn tensors(&self) -> &[(String, Tensor<f32>)] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Model tensors, without optimizer state.
    pub fn parameters(&self) -> impl Iterator<Item = &(String, Tensor<f32>)> {
        self.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("optimizer."))
    }

    /// Rebuilds the model described by the metadata.
    pub fn to_model(&self) -> Result<VitSr<f32>> {
        let mut params = ParamSet::new();
        for (name, t) in self.parameters() {
            params.insert(name.clone(), t.clone())?;
        }
        VitSr::from_params(self.meta.model.clone(), params)
    }

    /// Restores the optimizer, when the checkpoint carries its state.
    pub fn optimizer(&self, params: &ParamSet<f32>) -> Result<Option<AdamW>> {
        if !self.meta.optimizer_state {
            return Ok(None);
        }
        let train = self.meta.train.as_ref().ok_or_else(|| {
            Error::Config("checkpoint has optimizer state but no training config".into())
        })?;
        let collect = |prefix: &str| -> Result<Vec<Vec<f32>>> {
            params
                .iter()
                .map(|p| {
                    self.tensor(&format!("{prefix}{}", p.name))
                        .map(|t| t.data().to_vec())
                        .ok_or_else(|| Error::Config(format!("missing {prefix}{}", p.name)))
                })
                .collect()
        };
        AdamW::from_state(
            train.optimizer(),
            self.meta.optimizer_step.unwrap_or(0),
            collect(M_PREFIX)?,
            collect(V_PREFIX)?,
            params,
        )
        .map(Some)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Config(format!("cannot serialize checkpoint metadata: {e}")))?;
        let payload: usize = self
            .tensors
            .iter()
            .map(|(n, t)| n.len() + 8 * t.shape().len() + 4 * t.len() + 4)
            .sum();
        let mut out = Vec::with_capacity(24 + meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::Config("too many tensors for one checkpoint".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Config(format!("tensor name too long: {name}")))?;
            let ndim = u8::try_from(t.shape().len())
                .map_err(|_| Error::Config(format!("tensor {name} has too many axes")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(ndim);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; `origin` only labels errors.
    pub fn from_bytes(buf: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            buf,
            pos: 0,
            origin,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(origin, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported version {version}"),
            ));
        }
        let meta_len = r.u64()?;
        let meta_len = r.len(meta_len)?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::format(origin, format!("bad metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(origin, "tensor name is not UTF-8"))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::format(
                    origin,
                    format!("tensor {name}: dtype {dtype}"),
                ));
            }
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = r.u64()?;
                shape.push(r.len(d)?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| Error::format(origin, format!("tensor {name}: shape overflow")))?;
            let data = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::format(origin, format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(Error::format(origin, "trailing bytes after last tensor"));
        }
        Ok(Self { meta, tensors })
    }

    /// Writes atomically through a temporary file in the same directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
