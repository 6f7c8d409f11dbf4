//! Single-file checkpoints.
//!
//! ```text
//! b"TBNETCKP"  u32 version (LE)  u64 header length (LE)
//! header: JSON {config, flags, epoch, step, best_val_miou, class_weights, tensors: [{name, kind, shape, offset}]}
//! data:   little-endian f64 values; `offset` counts values from the start of the data block
//! ```
//!
//! Tensors are matched by name on load, so a checkpoint written by a network
//! with extra or fewer layers still loads everything it shares.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tbnet_tensor::Tensor;

use crate::config::{AblationFlags, TrainConfig};
use crate::data::ClassWeights;
use crate::error::{Error, Result};
use crate::network::ParamStore;

pub const MAGIC: &[u8; 8] = b"TBNETCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    /// Optimizer accumulator of the parameter with the same name.
    Optim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    flags: AblationFlags,
    epoch: usize,
    step: usize,
    best_val_miou: Option<f64>,
    class_weights: ClassWeights,
    tensors: Vec<Entry>,
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub flags: AblationFlags,
    pub epoch: usize,
    pub step: usize,
    pub best_val_miou: Option<f64>,
    pub class_weights: ClassWeights,
    pub params: ParamStore,
    pub optim: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        let mut push = |name: &str, kind, t: &Tensor| {
            tensors.push(Entry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
                offset: data.len(),
            });
            data.extend_from_slice(t.data());
        };
        for (n, t) in self.params.params() {
            push(n, TensorKind::Param, t);
        }
        for (n, t) in self.params.buffers() {
            push(n, TensorKind::Buffer, t);
        }
        for (n, t) in &self.optim {
            push(n, TensorKind::Optim, t);
        }
        let header = Header {
            config: self.config.clone(),
            flags: self.flags,
            epoch: self.epoch,
            step: self.step,
            best_val_miou: self.best_val_miou,
            class_weights: self.class_weights.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + data.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let data = &bytes[20 + hlen..];
        if !data.len().is_multiple_of(8) {
            return Err(bad("data block is not a whole number of values"));
        }
        let mut params = ParamStore::new();
        let mut optim = Vec::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = data
                .get(e.offset * 8..(e.offset + n) * 8)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the end of the file", e.name)))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape, values)?;
            match e.kind {
                TensorKind::Param => params.insert(e.name, t),
                TensorKind::Buffer => params.insert_buffer(e.name, t),
                TensorKind::Optim => optim.push((e.name, t)),
            }
        }
        Ok(Self {
            config: header.config,
            flags: header.flags,
            epoch: header.epoch,
            step: header.step,
            best_val_miou: header.best_val_miou,
            class_weights: header.class_weights,
            params,
            optim,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
