//! On-disk training state: a directory with `manifest.json` and a single
//! `tensors.bin` of little-endian `f32` values, row-major, indexed by name,
//! shape and byte offset in the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::trainer::{BestSnapshot, EpochRecord};
use super::{Adam, TrainConfig};
use crate::corpus::Vocab;
use crate::distill::{GateMode, GateState};
use crate::model::{ModelConfig, ParamStore, TransformerModel};
use crate::tensor::Tensor;
use crate::{io_err, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tensor blob holds {actual} bytes, index needs {expected}")]
    TruncatedBlob { expected: u64, actual: u64 },
    #[error("manifest and tensor index disagree: {0}")]
    IndexMismatch(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

/// Everything needed to rebuild a model or resume its training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub vocab: Option<Vocab>,
    pub step: usize,
    pub epoch: usize,
    pub params: ParamStore,
    pub adam: Option<Adam>,
    pub gate: Option<GateState>,
    pub gate_adam: Option<Adam>,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    pub(crate) best: Option<BestSnapshot>,
}

impl Checkpoint {
    /// A bare model (no optimizer state).
    pub fn from_model(model: &TransformerModel, vocab: Option<&Vocab>) -> Self {
        Self {
            model_config: model.config().clone(),
            train_config: None,
            vocab: vocab.cloned(),
            step: 0,
            epoch: 0,
            params: model.params().clone(),
            adam: None,
            gate: None,
            gate_adam: None,
            history: Vec::new(),
            step_losses: Vec::new(),
            best: None,
        }
    }

    pub fn model(&self) -> Result<TransformerModel> {
        let mut m = TransformerModel::from_params(self.model_config.clone(), self.params.clone())?;
        m.eval();
        Ok(m)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamEntry {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct GateEntry {
    mode: GateMode,
    last_epoch_mean_g: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BestEntry {
    dev_bleu: f64,
    epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    vocab: Option<Vocab>,
    step: usize,
    epoch: usize,
    history: Vec<EpochRecord>,
    step_losses: Vec<f64>,
    /// Parameter names in model order; tensors are stored as `model/<name>`.
    params: Vec<String>,
    /// Moments are stored as `adam.m/<name>` and `adam.v/<name>`.
    optimizer: Option<AdamEntry>,
    gate: Option<GateEntry>,
    gate_params: Vec<String>,
    gate_optimizer: Option<AdamEntry>,
    best: Option<BestEntry>,
    tensor_count: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

struct BlobWriter {
    bytes: Vec<u8>,
    index: Vec<TensorEntry>,
}

impl BlobWriter {
    fn push(&mut self, name: String, shape: &[usize], data: &[f32]) {
        let offset = self.bytes.len() as u64;
        for x in data {
            self.bytes.extend_from_slice(&x.to_le_bytes());
        }
        self.index.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset,
            len: 4 * data.len() as u64,
        });
    }

    fn store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}/{name}"), t.shape(), t.data());
        }
    }

    fn moments(&mut self, prefix: &str, store: &ParamStore, adam: &Adam) {
        for (i, (name, t)) in store.iter().enumerate() {
            self.push(format!("{prefix}.m/{name}"), t.shape(), &adam.m[i]);
            self.push(format!("{prefix}.v/{name}"), t.shape(), &adam.v[i]);
        }
    }
}

fn adam_entry(a: &Adam) -> AdamEntry {
    AdamEntry {
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        step: a.step,
    }
}

/// Write `ckpt` into directory `dir` (created if missing).
pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut w = BlobWriter {
        bytes: Vec::new(),
        index: Vec::new(),
    };
    w.store("model", &ckpt.params);
    if let Some(a) = &ckpt.adam {
        w.moments("adam", &ckpt.params, a);
    }
    if let Some(g) = &ckpt.gate {
        w.store("gate", &g.params);
        if let Some(a) = &ckpt.gate_adam {
            w.moments("gate_adam", &g.params, a);
        }
    }
    if let Some(b) = &ckpt.best {
        w.store("best", &b.params);
        if let Some(g) = &b.gate {
            w.store("best_gate", g);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        vocab: ckpt.vocab.clone(),
        step: ckpt.step,
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
        step_losses: ckpt.step_losses.clone(),
        params: ckpt.params.names().to_vec(),
        optimizer: ckpt.adam.as_ref().map(adam_entry),
        gate: ckpt.gate.as_ref().map(|g| GateEntry {
            mode: g.mode,
            last_epoch_mean_g: g.last_epoch_mean_g,
        }),
        gate_params: ckpt.gate.as_ref().map(|g| g.params.names().to_vec()).unwrap_or_default(),
        gate_optimizer: ckpt.gate_adam.as_ref().map(adam_entry),
        best: ckpt.best.as_ref().map(|b| BestEntry {
            dev_bleu: b.dev_bleu,
            epoch: b.epoch,
        }),
        tensor_count: w.index.len(),
        tensors: w.index,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, json).map_err(io_err(&mpath))?;
    let bpath = dir.join(BLOB);
    fs::write(&bpath, &w.bytes).map_err(io_err(&bpath))?;
    Ok(())
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    index: &'a [TensorEntry],
}

impl BlobReader<'_> {
    fn tensor(&self, name: &str) -> std::result::Result<Tensor<f32>, CheckpointError> {
        let e = self
            .index
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::IndexMismatch(format!("tensor {name} is referenced but not indexed")))?;
        let raw = &self.bytes[e.offset as usize..(e.offset + e.len) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::IndexMismatch(format!("{name}: {err}")))
    }

    fn store(&self, prefix: &str, names: &[String]) -> std::result::Result<ParamStore, CheckpointError> {
        let mut s = ParamStore::new();
        for n in names {
            s.insert(n.clone(), self.tensor(&format!("{prefix}/{n}"))?);
        }
        Ok(s)
    }

    fn adam(&self, prefix: &str, names: &[String], e: &AdamEntry) -> std::result::Result<Adam, CheckpointError> {
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for n in names {
            m.push(self.tensor(&format!("{prefix}.m/{n}"))?.into_data());
            v.push(self.tensor(&format!("{prefix}.v/{n}"))?.into_data());
        }
        Ok(Adam {
            beta1: e.beta1,
            beta2: e.beta2,
            eps: e.eps,
            step: e.step,
            m,
            v,
        })
    }
}

fn check_index(index: &[TensorEntry], count: usize, blob_len: u64) -> std::result::Result<(), CheckpointError> {
    if index.len() != count {
        return Err(CheckpointError::IndexMismatch(format!(
            "manifest declares {count} tensors, index lists {}",
            index.len()
        )));
    }
    let mut expected = 0u64;
    for e in index {
        let numel: usize = e.shape.iter().product();
        if e.len != 4 * numel as u64 {
            return Err(CheckpointError::IndexMismatch(format!(
                "{} has shape {:?} but {} bytes",
                e.name, e.shape, e.len
            )));
        }
        if e.offset != expected {
            return Err(CheckpointError::IndexMismatch(format!(
                "{} starts at byte {}, expected {expected}",
                e.name, e.offset
            )));
        }
        expected += e.len;
    }
    if blob_len < expected {
        return Err(CheckpointError::TruncatedBlob {
            expected,
            actual: blob_len,
        });
    }
    if blob_len > expected {
        return Err(CheckpointError::IndexMismatch(format!(
            "blob has {blob_len} bytes, index covers {expected}"
        )));
    }
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let probe: VersionProbe =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if probe.format_version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: probe.format_version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let m: Manifest = serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let bpath = dir.join(BLOB);
    let bytes = fs::read(&bpath).map_err(io_err(&bpath))?;
    check_index(&m.tensors, m.tensor_count, bytes.len() as u64)?;
    let r = BlobReader {
        bytes: &bytes,
        index: &m.tensors,
    };
    let params = r.store("model", &m.params)?;
    let adam = m.optimizer.as_ref().map(|e| r.adam("adam", &m.params, e)).transpose()?;
    let gate = m
        .gate
        .as_ref()
        .map(|g| {
            Ok::<_, CheckpointError>(GateState {
                mode: g.mode,
                params: r.store("gate", &m.gate_params)?,
                last_epoch_mean_g: g.last_epoch_mean_g,
            })
        })
        .transpose()?;
    let gate_adam = m
        .gate_optimizer
        .as_ref()
        .map(|e| r.adam("gate_adam", &m.gate_params, e))
        .transpose()?;
    let best = m
        .best
        .as_ref()
        .map(|b| {
            Ok::<_, CheckpointError>(BestSnapshot {
                dev_bleu: b.dev_bleu,
                epoch: b.epoch,
                params: r.store("best", &m.params)?,
                gate: if m.gate.is_some() {
                    Some(r.store("best_gate", &m.gate_params)?)
                } else {
                    None
                },
            })
        })
        .transpose()?;
    let ckpt = Checkpoint {
        model_config: m.model_config,
        train_config: m.train_config,
        vocab: m.vocab,
        step: m.step,
        epoch: m.epoch,
        params,
        adam,
        gate,
        gate_adam,
        history: m.history,
        step_losses: m.step_losses,
        best,
    };
    // Catch parameter sets that do not fit the declared architecture.
    TransformerModel::from_params(ckpt.model_config.clone(), ckpt.params.clone())?;
    Ok(ckpt)
}
