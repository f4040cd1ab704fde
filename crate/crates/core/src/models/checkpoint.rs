//! Checkpoint container: `SQA1`, a little-endian `u32` header length, a JSON
//! header, then the tensors as little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ResNet, ResNetConfig, VqpMode, VqpNet};
use crate::error::{Error, Result};
use crate::nn::{Module, Tensor};
use crate::pooling::{AggregatorConfig, FcnnAggregator};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SQA1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training metadata carried alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainMeta {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub seed: u64,
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    /// 20-class joint type/level classifier.
    Fdc(ResNet<f32>),
    /// 5-class distortion type classifier.
    Fdc5(ResNet<f32>),
    /// Frame quality regressor.
    Fqp(ResNet<f32>),
    Vqp(VqpNet),
    /// Echoes the reference score stored in the manifest; used to check
    /// the evaluation path end to end.
    Oracle,
}

impl SavedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            SavedModel::Fdc(_) => "fdc",
            SavedModel::Fdc5(_) => "fdc5",
            SavedModel::Fqp(_) => "fqp",
            SavedModel::Vqp(_) => "vqp",
            SavedModel::Oracle => "oracle",
        }
    }

    fn tensors(&self) -> Vec<(String, Tensor<f32>)> {
        match self {
            SavedModel::Fdc(m) | SavedModel::Fdc5(m) | SavedModel::Fqp(m) => m.named_tensors(),
            SavedModel::Vqp(v) => v.named_tensors(),
            SavedModel::Oracle => Vec::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    frame: Option<ResNetConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    aggregator: Option<AggregatorConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<VqpMode>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    config: ModelConfig,
    metadata: TrainMeta,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SavedModel,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn new(model: SavedModel, meta: TrainMeta) -> Self {
        Checkpoint { model, meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.model.tensors();
        let mut entries = Vec::with_capacity(tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let config = match &self.model {
            SavedModel::Fdc(m) | SavedModel::Fdc5(m) | SavedModel::Fqp(m) => ModelConfig {
                frame: Some(m.config.clone()),
                aggregator: None,
                mode: None,
            },
            SavedModel::Vqp(v) => ModelConfig {
                frame: Some(v.frame.config.clone()),
                aggregator: Some(v.aggregator.config.clone()),
                mode: Some(v.mode),
            },
            SavedModel::Oracle => ModelConfig {
                frame: None,
                aggregator: None,
                mode: None,
            },
        };
        let header = Header {
            version: CHECKPOINT_VERSION,
            kind: self.model.kind().to_owned(),
            config,
            metadata: self.meta.clone(),
            tensors: entries,
            payload_bytes: payload.len(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::format(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint file (bad magic)"));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        if body.len() < len {
            return Err(Error::format("corrupt checkpoint: header truncated"));
        }
        let header: Header = serde_json::from_slice(&body[..len])
            .map_err(|e| Error::format(format!("corrupt checkpoint header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let payload = &body[len..];
        if payload.len() != header.payload_bytes {
            return Err(Error::format(format!(
                "corrupt checkpoint: payload has {} bytes, header says {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        let mut stored = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(4 * n).filter(|&end| end <= payload.len());
            let Some(end) = end else {
                return Err(Error::format(format!("corrupt checkpoint: tensor {} out of bounds", e.name)));
            };
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            stored.insert(e.name.clone(), Tensor::new(&e.shape, data)?);
        }

        let frame_config = || {
            header
                .config
                .frame
                .clone()
                .ok_or_else(|| Error::format("checkpoint lacks a network config"))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = match header.kind.as_str() {
            "fdc" | "fdc5" | "fqp" => {
                let mut net = ResNet::<f32>::new(frame_config()?, &mut rng)?;
                fill(&mut net, &mut stored)?;
                match header.kind.as_str() {
                    "fdc" => SavedModel::Fdc(net),
                    "fdc5" => SavedModel::Fdc5(net),
                    _ => SavedModel::Fqp(net),
                }
            }
            "vqp" => {
                let frame = ResNet::<f32>::new(frame_config()?, &mut rng)?;
                let agg_config = header
                    .config
                    .aggregator
                    .clone()
                    .ok_or_else(|| Error::format("checkpoint lacks an aggregator config"))?;
                let aggregator = FcnnAggregator::zeros(agg_config)?;
                let mode = header.config.mode.unwrap_or(VqpMode::EndToEnd);
                let mut net = VqpNet::new(frame, aggregator, mode)?;
                fill(&mut net, &mut stored)?;
                SavedModel::Vqp(net)
            }
            "oracle" => SavedModel::Oracle,
            other => return Err(Error::format(format!("unknown checkpoint kind {other:?}"))),
        };
        if let Some(name) = stored.keys().next() {
            return Err(Error::format(format!("checkpoint has unexpected tensor {name}")));
        }
        Ok(Checkpoint {
            model,
            meta: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn fill<M: Module<f32>>(module: &mut M, stored: &mut BTreeMap<String, Tensor<f32>>) -> Result<()> {
    let mut failure = None;
    module.visit_mut("", &mut |name, t, _| {
        if failure.is_some() {
            return;
        }
        match stored.remove(&name) {
            Some(s) if s.shape() == t.shape() => *t = s,
            Some(s) => {
                failure = Some(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    s.shape(),
                    t.shape()
                ))
            }
            None => failure = Some(format!("checkpoint is missing tensor {name}")),
        }
    });
    match failure {
        Some(msg) => Err(Error::format(msg)),
        None => Ok(()),
    }
}
