//! Checkpoint file: magic, little-endian u64 header length, JSON header,
//! then the parameter vector and running statistics as little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::Standardizer;
use super::{ArchSpec, Model, Net, ParamSlot};
use crate::biomarkers::COLUMN_ORDER_VERSION;
use crate::labeling::LabelParams;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PPGWCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    arch: ArchSpec,
    slots: Vec<ParamSlot>,
    n_params: usize,
    n_stats: usize,
    features: Vec<String>,
    column_order_version: u32,
    standardizer: Standardizer,
    label_params: LabelParams,
    seed: u64,
    fold: usize,
    epoch: usize,
    val_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub standardizer: Standardizer,
    pub label_params: LabelParams,
    pub column_order_version: u32,
    pub seed: u64,
    pub fold: usize,
    pub epoch: usize,
    pub val_macro_f1: f64,
}

impl ModelCheckpoint {
    pub fn new(
        model: Model,
        standardizer: Standardizer,
        label_params: LabelParams,
        seed: u64,
        fold: usize,
        epoch: usize,
        val_macro_f1: f64,
    ) -> Self {
        ModelCheckpoint {
            model,
            standardizer,
            label_params,
            column_order_version: COLUMN_ORDER_VERSION,
            seed,
            fold,
            epoch,
            val_macro_f1,
        }
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.standardizer
            .features
            .iter()
            .map(|f| f.name().to_string())
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let header = Header {
            version: CHECKPOINT_VERSION,
            arch: m.arch.clone(),
            slots: m.slots(),
            n_params: m.params.len(),
            n_stats: m.running_mean.len(),
            features: self.feature_names(),
            column_order_version: self.column_order_version,
            standardizer: self.standardizer.clone(),
            label_params: self.label_params,
            seed: self.seed,
            fold: self.fold,
            epoch: self.epoch,
            val_macro_f1: self.val_macro_f1,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * (m.params.len() + 2 * m.running_mean.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in m.params.iter().chain(&m.running_mean).chain(&m.running_var) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let h: Header = serde_json::from_slice(body)?;
        if h.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", h.version)));
        }
        h.arch.validate()?;
        let net = Net::build(&h.arch);
        if net.n_params != h.n_params || net.n_stats != h.n_stats {
            return Err(bad("parameter count does not match architecture"));
        }
        if h.standardizer.features.len() != h.arch.in_channels {
            return Err(bad("feature manifest does not match input channels"));
        }
        let block = &bytes[16 + hlen..];
        let n = h.n_params + 2 * h.n_stats;
        if block.len() != 8 * n {
            return Err(Error::Checkpoint(format!(
                "parameter block holds {} bytes, expected {}",
                block.len(),
                8 * n
            )));
        }
        let vals: Vec<f64> = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (params, stats) = vals.split_at(h.n_params);
        let (rm, rv) = stats.split_at(h.n_stats);
        Ok(ModelCheckpoint {
            model: Model {
                arch: h.arch,
                params: params.to_vec(),
                running_mean: rm.to_vec(),
                running_var: rv.to_vec(),
            },
            standardizer: h.standardizer,
            label_params: h.label_params,
            column_order_version: h.column_order_version,
            seed: h.seed,
            fold: h.fold,
            epoch: h.epoch,
            val_macro_f1: h.val_macro_f1,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}
