//! Released checkpoint: dense base weights and model config, no mask.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PmpError, Result};
use crate::model::{FlatParamLayout, Model, ModelConfig};
use crate::quantgeom::crc32;

pub const CKPT_MAGIC: &[u8; 8] = b"PMPCKPT1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub steps: usize,
    pub mode: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub layout_hash: u64,
    pub params: Vec<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Self {
        Checkpoint {
            config: model.config.clone(),
            layout_hash: model.layout().layout_hash(),
            params: model.params().to_vec(),
            meta,
        }
    }

    /// Rebuilds the base model, checking the stored layout against the one
    /// the config implies.
    pub fn to_model(&self) -> Result<Model> {
        let model = Model::from_params(self.config.clone(), self.params.clone())?;
        self.check_layout(model.layout())?;
        Ok(model)
    }

    pub fn check_layout(&self, layout: &FlatParamLayout) -> Result<()> {
        if layout.layout_hash() != self.layout_hash || layout.d() != self.params.len() {
            return Err(PmpError::Compatibility(format!(
                "checkpoint layout {:#018x} (d={}) does not match model layout {:#018x} (d={})",
                self.layout_hash,
                self.params.len(),
                layout.layout_hash(),
                layout.d()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.config.clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| PmpError::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(36 + header.len() + 4 * self.params.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&self.layout_hash.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 36 || &bytes[..8] != CKPT_MAGIC {
            return Err(PmpError::Format("not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(PmpError::Format("checkpoint checksum mismatch".into()));
        }
        let word = |at: usize| u64::from_le_bytes(body[at..at + 8].try_into().expect("8 bytes"));
        let layout_hash = word(8);
        let d = word(16) as usize;
        let hlen = word(24) as usize;
        let start = 32usize;
        let expected = start
            .checked_add(hlen)
            .and_then(|x| x.checked_add(d.checked_mul(4)?));
        if expected != Some(body.len()) {
            return Err(PmpError::Format("checkpoint length does not match its header".into()));
        }
        let header: Header = serde_json::from_slice(&body[start..start + hlen])
            .map_err(|e| PmpError::Format(format!("checkpoint header: {e}")))?;
        let params = body[start + hlen..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Checkpoint {
            config: header.model,
            layout_hash,
            params,
            meta: header.meta,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
