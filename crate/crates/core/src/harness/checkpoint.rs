//! Checkpoint file: magic `FSVC1`, a JSON header, named f64 tensors, CRC32.
//! All integers are little-endian u32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::autodiff::{Real, Tensor};
use crate::models::{init_params, ModelConfig, ModelParams, ParamGroup};
use crate::protocol::Variant;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"FSVC1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub variant: Variant,
    pub model: ModelConfig,
    pub round: u32,
    pub clients: usize,
    pub eval_ensemble: bool,
}

/// Each client's effective model after training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub models: Vec<ModelParams>,
}

fn corrupt(detail: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(detail.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let count: usize = self.models.iter().map(|m| m.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (c, m) in self.models.iter().enumerate() {
            for (name, t) in m.names().iter().zip(m.tensors()) {
                let name = format!("client{c}.{name}");
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&(v as f64).to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc.try_into().unwrap());
        if stored != crc32fast::hash(body) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut pos = 5;
        let mut take = |n: usize| -> Result<&[u8], HarnessError> {
            let end = pos + n;
            if end > body.len() {
                return Err(corrupt("truncated"));
            }
            let s = &body[pos..end];
            pos = end;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let hlen = u32_at(take(4)?);
        let header: CheckpointHeader =
            serde_json::from_slice(take(hlen)?).map_err(|e| corrupt(format!("header: {e}")))?;
        let count = u32_at(take(4)?);
        let template = init_params(&header.model, 0);
        let mut models = vec![template.clone(); header.clients];
        let names = template.names();
        let mut filled = 0;
        for (c, model) in models.iter_mut().enumerate() {
            for (slot, expected) in model.tensors_mut().into_iter().zip(&names) {
                let nlen = u32_at(take(4)?);
                let name = std::str::from_utf8(take(nlen)?).map_err(|_| corrupt("tensor name is not UTF-8"))?;
                let want = format!("client{c}.{expected}");
                if name != want {
                    return Err(corrupt(format!("found tensor {name}, expected {want}")));
                }
                let rank = u32_at(take(4)?);
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(u32_at(take(4)?));
                }
                if shape != slot.shape() {
                    return Err(corrupt(format!("{name}: shape {shape:?}, model needs {:?}", slot.shape())));
                }
                let raw = take(slot.numel() * 8)?;
                let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()) as Real).collect();
                *slot = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
                filled += 1;
            }
        }
        if filled != count || pos != body.len() {
            return Err(corrupt(format!("header declares {count} tensors, model layout has {filled}")));
        }
        Ok(Self { header, models })
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| HarnessError::Io { path: path.into(), source })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path).map_err(|source| HarnessError::Io { path: path.into(), source })?;
        Self::from_bytes(&bytes)
    }
}
