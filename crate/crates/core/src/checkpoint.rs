//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, the little-endian tensor payload, and a trailing CRC-32 of every
//! preceding byte. All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ArchitectureSpec, Model, Param};
use crate::tensor::{numel, DType, Element, Tensor};
use crate::train::{EpochRecord, OptimizerState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"CAPSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dtype: DType,
    pub spec: ArchitectureSpec,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    pub best_val_accuracy: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub optimizer_step: u64,
    /// Optimizer slot names, e.g. `["m", "v"]` for Adam.
    pub optimizer_slots: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub config: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub history: Vec<EpochRecord>,
}

impl<T: Element> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: String, t: &Tensor<T>| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            payload.extend_from_slice(&T::to_le_bytes_vec(t.data()));
        };
        for p in self.model.params() {
            push(format!("param/{}", p.name), &p.value);
        }
        for (slot, values) in self.optimizer.slot_names.iter().zip(&self.optimizer.slots) {
            for (p, v) in self.model.params().iter().zip(values) {
                push(format!("{slot}/{}", p.name), v);
            }
        }
        let header = Header {
            dtype: T::DTYPE,
            spec: self.model.spec().clone(),
            seed: self.seed,
            epoch: self.epoch,
            config: self.config.clone(),
            best_val_accuracy: self.best_val_accuracy,
            history: self.history.clone(),
            optimizer_step: self.optimizer.step,
            optimizer_slots: self.optimizer.slot_names.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(24 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(bad(format!("checksum mismatch (stored {stored:#010x}, computed {actual:#010x})")));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_bytes = body.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| bad(format!("header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(bad(format!("stored dtype {:?}, requested {:?}", header.dtype, T::DTYPE)));
        }
        let payload = &body[20 + hlen..];
        let width = std::mem::size_of::<T>();
        let read = |entry: &TensorEntry| -> Result<Tensor<T>> {
            let len = numel(&entry.shape) * width;
            let raw = payload
                .get(entry.offset..entry.offset + len)
                .ok_or_else(|| bad(format!("{} lies outside the payload", entry.name)))?;
            Tensor::new(entry.shape.clone(), T::from_le_bytes_slice(raw))
        };
        let find = |name: &str| -> Result<Tensor<T>> {
            let entry = header
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            read(entry)
        };
        let names: Vec<String> = header.spec.parameter_shapes().into_iter().map(|(n, _)| n).collect();
        let params = names
            .iter()
            .map(|n| Ok(Param { name: n.clone(), value: find(&format!("param/{n}"))? }))
            .collect::<Result<Vec<_>>>()?;
        let model = Model::from_params(header.spec.clone(), params).map_err(|e| bad(e.to_string()))?;
        let slots = header
            .optimizer_slots
            .iter()
            .map(|s| names.iter().map(|n| find(&format!("{s}/{n}"))).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            model,
            optimizer: OptimizerState {
                step: header.optimizer_step,
                slot_names: header.optimizer_slots,
                slots,
            },
            config: header.config,
            seed: header.seed,
            epoch: header.epoch,
            best_val_accuracy: header.best_val_accuracy,
            history: header.history,
        })
    }

    /// Write via a temporary sibling and rename, so readers never see a
    /// half-written file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
