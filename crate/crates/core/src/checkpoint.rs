//! Versioned binary container for trained models.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, a JSON header,
//! the raw little-endian `f64` payload (parameters, then optimizer moments),
//! and a trailing FNV-1a 64 checksum of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assignment::DsnRegistry;
use crate::datamodel::{FeatureLayout, TaskMode};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::synthdata::normalize::Normalizer;
use crate::tensor::Mat;
use crate::trainer::AdamState;

pub const MAGIC: &[u8; 8] = b"DSGCKPT\0";
pub const FORMAT_VERSION: &str = "deepstate-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: String,
    dataset_version: String,
    epoch: usize,
    model: ModelConfig,
    registry: DsnRegistry,
    layout: FeatureLayout,
    task: TaskMode,
    normalizer: Normalizer,
    tensors: Vec<TensorEntry>,
    optimizer_step: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub epoch: usize,
    pub normalizer: Normalizer,
    pub dataset_version: String,
    pub optimizer: Option<AdamState>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn corrupt(offset: usize, message: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        offset,
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let header = Header {
            format_version: FORMAT_VERSION.into(),
            dataset_version: self.dataset_version.clone(),
            epoch: self.epoch,
            model: self.model.config.clone(),
            registry: self.model.registry.clone(),
            layout: self.model.layout.clone(),
            task: self.model.task,
            normalizer: self.normalizer.clone(),
            tensors: store
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                })
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * store.num_scalars() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |m: &Mat| {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in store.iter() {
            put(&p.value);
        }
        if let Some(o) = &self.optimizer {
            o.m.iter().chain(&o.v).for_each(&mut put);
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(corrupt(bytes.len(), "file shorter than the fixed preamble"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt(0, "bad magic bytes"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let hend = 12 + hlen;
        if bytes.len() < hend {
            return Err(corrupt(bytes.len(), format!("header of {hlen} bytes runs past end of file")));
        }
        let header: Header = serde_json::from_slice(&bytes[12..hend])
            .map_err(|e| corrupt(12 + e.column().saturating_sub(1), format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION.into(),
                found: header.format_version,
            });
        }
        let n_params: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        let n_values = n_params * if header.optimizer_step.is_some() { 3 } else { 1 };
        let payload_end = hend + 8 * n_values;
        if bytes.len() < payload_end + 8 {
            return Err(corrupt(bytes.len(), format!("payload needs {} bytes through offset {}", 8 * n_values + 8, payload_end + 8)));
        }
        if bytes.len() > payload_end + 8 {
            return Err(corrupt(payload_end + 8, "trailing bytes after checksum"));
        }
        let stored = u64::from_le_bytes(bytes[payload_end..payload_end + 8].try_into().unwrap());
        if stored != fnv1a(&bytes[..payload_end]) {
            return Err(corrupt(payload_end, "checksum mismatch"));
        }

        let mut model = Model::new(header.model.clone(), header.registry.clone(), header.layout.clone(), header.task, 0)?;
        if model.registry != header.registry {
            return Err(corrupt(12, "registry does not match the model configuration"));
        }
        let ids: Vec<_> = model.store.ids().collect();
        if ids.len() != header.tensors.len() {
            return Err(corrupt(12, format!("{} tensors listed, model has {}", header.tensors.len(), ids.len())));
        }
        let mut off = hend;
        let read = |rows: usize, cols: usize, off: &mut usize| {
            let data = bytes[*off..*off + 8 * rows * cols]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *off += 8 * rows * cols;
            Mat::from_vec(rows, cols, data)
        };
        for (id, t) in ids.iter().zip(&header.tensors) {
            let m = model.store.get(*id);
            if model.store.name(*id) != t.name || m.shape() != (t.rows, t.cols) {
                return Err(corrupt(
                    off,
                    format!("tensor `{}` {}x{} does not match model tensor `{}` {:?}", t.name, t.rows, t.cols, model.store.name(*id), m.shape()),
                ));
            }
            *model.store.get_mut(*id) = read(t.rows, t.cols, &mut off);
        }
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let m = header.tensors.iter().map(|t| read(t.rows, t.cols, &mut off)).collect();
                let v = header.tensors.iter().map(|t| read(t.rows, t.cols, &mut off)).collect();
                Some(AdamState { step, m, v })
            }
            None => None,
        };
        Ok(Self {
            model,
            epoch: header.epoch,
            normalizer: header.normalizer,
            dataset_version: header.dataset_version,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the stored layout matches `layout`.
    pub fn load_for(path: &Path, layout: &FeatureLayout) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.model.layout != layout {
            return Err(Error::Layout(format!(
                "checkpoint layout `{}` ({} features) does not match dataset layout `{}` ({} features)",
                ck.model.layout.version,
                ck.model.layout.f_total(),
                layout.version,
                layout.f_total()
            )));
        }
        Ok(ck)
    }
}
