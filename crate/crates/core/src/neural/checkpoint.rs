//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "STIMKIT1"
//! offset 8   u32       header length N in bytes
//! offset 12  N bytes   UTF-8 JSON header
//! offset 12+N          f32 payload, tensors back to back in header order
//! ```
//!
//! Parameter `offset`s in the header are byte offsets from the start of the
//! payload; `count` is the number of f32 elements.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::image::write_atomic;
use crate::pipeline::PipelineSettings;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STIMKIT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMetadata {
    pub epochs_run: usize,
    /// Mean loss of the last epoch; absent when no epoch ran.
    pub final_loss: Option<f64>,
    pub seed: u64,
    pub pipeline: Option<PipelineSettings>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub parameters: Vec<NamedTensor>,
    pub training_metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParameterEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    training_metadata: TrainingMetadata,
    parameters: Vec<ParameterEntry>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model<f32>, training_metadata: TrainingMetadata) -> Self {
        ModelCheckpoint {
            format_version: FORMAT_VERSION,
            config: model.config().clone(),
            parameters: model
                .parameter_names()
                .into_iter()
                .zip(model.parameters())
                .map(|(name, t)| NamedTensor {
                    name,
                    tensor: t.clone(),
                })
                .collect(),
            training_metadata,
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_parameters(&self.config, self.parameters.iter().map(|p| p.tensor.clone()).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .parameters
            .iter()
            .map(|p| {
                let e = ParameterEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    offset,
                    count: p.tensor.len(),
                };
                offset += 4 * p.tensor.len();
                e
            })
            .collect();
        let header = Header {
            format_version: self.format_version,
            config: self.config.clone(),
            training_metadata: self.training_metadata.clone(),
            parameters: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.parameters {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(raw: &[u8], source_name: &str) -> Result<Self> {
        let fmt = |msg: String| Error::Format(format!("{source_name}: {msg}"));
        if raw.len() < 12 || &raw[..8] != CHECKPOINT_MAGIC {
            return Err(fmt("not a checkpoint (bad magic)".into()));
        }
        let n = u32::from_le_bytes(raw[8..12].try_into().unwrap()) as usize;
        let header_end = 12usize
            .checked_add(n)
            .filter(|&e| e <= raw.len())
            .ok_or_else(|| fmt(format!("header length {n} exceeds file size {}", raw.len())))?;
        let header: Header = serde_json::from_slice(&raw[12..header_end])
            .map_err(|e| fmt(format!("invalid header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(fmt(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        header
            .config
            .validate("config")
            .map_err(|e| fmt(format!("invalid model config: {e}")))?;
        let payload = &raw[header_end..];
        let layout = header.config.parameter_layout();
        if layout.len() != header.parameters.len() {
            return Err(fmt(format!(
                "config implies {} parameter tensors, header lists {}",
                layout.len(),
                header.parameters.len()
            )));
        }
        let mut expected_offset = 0;
        let mut parameters = Vec::with_capacity(layout.len());
        for ((name, shape), e) in layout.iter().zip(&header.parameters) {
            if &e.name != name || &e.shape != shape {
                return Err(fmt(format!(
                    "parameter `{}` {:?} does not match expected `{name}` {shape:?}",
                    e.name, e.shape
                )));
            }
            let count: usize = shape.iter().product();
            if e.count != count || e.offset != expected_offset {
                return Err(fmt(format!("parameter `{name}` has inconsistent offset/count")));
            }
            let bytes = payload
                .get(e.offset..e.offset + 4 * count)
                .ok_or_else(|| fmt(format!("payload truncated in `{name}`")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            parameters.push(NamedTensor {
                name: name.clone(),
                tensor: Tensor::from_vec(shape, data)?,
            });
            expected_offset += 4 * count;
        }
        if payload.len() != expected_offset {
            return Err(fmt(format!(
                "payload has {} bytes, header describes {expected_offset}",
                payload.len()
            )));
        }
        Ok(ModelCheckpoint {
            format_version: header.format_version,
            config: header.config,
            parameters,
            training_metadata: header.training_metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&raw, &path.display().to_string())
    }
}
