//! Binary checkpoint: magic, version, a JSON header, then raw `f64` LE data.
//!
//! ```text
//! b"HDYOLOCK" | u32 version | u64 header_len | header JSON | params… | optimizer buffers…
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::Model;
use crate::autograd::{ParamEntry, ParamKind};
use crate::error::{HdError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HDYOLOCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: String,
    pub step: u64,
    /// Per-parameter buffers (momentum, Adam moments) in a fixed order.
    #[serde(skip)]
    pub buffers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerState>,
    pub epoch: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    seed: u64,
    params: Vec<ParamMeta>,
    optimizer: Option<OptimizerState>,
    buffer_lens: Vec<usize>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<OptimizerState>, epoch: usize, seed: u64) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.entries().to_vec(),
            optimizer,
            epoch,
            seed,
        }
    }

    /// Error on the first field where the stored config differs from `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        let mismatch = |field: &str, found: String, want: String| HdError::ConfigMismatch {
            field: field.into(),
            found,
            expected: want,
        };
        let (a, b) = (&self.config, expected);
        if a.num_classes != b.num_classes {
            return Err(mismatch("num_classes", a.num_classes.to_string(), b.num_classes.to_string()));
        }
        if a.input_size != b.input_size {
            return Err(mismatch("input_size", a.input_size.to_string(), b.input_size.to_string()));
        }
        if a.widths != b.widths {
            return Err(mismatch("widths", format!("{:?}", a.widths), format!("{:?}", b.widths)));
        }
        if a.sam_kernels != b.sam_kernels {
            return Err(mismatch(
                "sam_kernels",
                format!("{:?}", a.sam_kernels),
                format!("{:?}", b.sam_kernels),
            ));
        }
        if a != b {
            return Err(mismatch("config", format!("{a:?}"), format!("{b:?}")));
        }
        Ok(())
    }

    /// Build a model from the stored config and load the stored tensors.
    pub fn to_model(&self) -> Result<Model> {
        let mut m = Model::new(self.config.clone(), self.seed)?;
        m.params.load_from(&self.params)?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let opt_buffers: &[Vec<f64>] = self.optimizer.as_ref().map_or(&[], |o| &o.buffers);
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|e| ParamMeta {
                    name: e.name.clone(),
                    kind: e.kind,
                    shape: e.tensor.shape().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.clone(),
            buffer_lens: opt_buffers.iter().map(Vec::len).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.params {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for b in opt_buffers {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let trunc = |what: &str| HdError::Checkpoint(format!("truncated file: missing {what}"));
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(HdError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes.get(8..12).ok_or_else(|| trunc("version"))?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(HdError::Checkpoint(format!(
                "unsupported version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes.get(12..20).ok_or_else(|| trunc("header length"))?.try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).ok_or_else(|| trunc("header"))?;
        let header: Header = serde_json::from_slice(bytes.get(20..hend).ok_or_else(|| trunc("header"))?)?;
        header.config.validate()?;

        let mut cursor = hend;
        let mut take = |n: usize, what: &str| -> Result<Vec<f64>> {
            let end = cursor + n * 8;
            let raw = bytes.get(cursor..end).ok_or_else(|| trunc(what))?;
            cursor = end;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let mut params = Vec::with_capacity(header.params.len());
        for m in header.params {
            let n = m.shape.iter().product();
            let data = take(n, &format!("data of `{}`", m.name))?;
            params.push(ParamEntry {
                name: m.name,
                kind: m.kind,
                tensor: Tensor::from_parts(m.shape, data),
            });
        }
        let mut buffers = Vec::with_capacity(header.buffer_lens.len());
        for (i, &n) in header.buffer_lens.iter().enumerate() {
            buffers.push(take(n, &format!("optimizer buffer {i}"))?);
        }
        if cursor != bytes.len() {
            return Err(HdError::Checkpoint(format!(
                "{} trailing bytes after data",
                bytes.len() - cursor
            )));
        }
        let optimizer = header.optimizer.map(|mut o| {
            o.buffers = buffers;
            o
        });
        Ok(Self {
            config: header.config,
            params,
            optimizer,
            epoch: header.epoch,
            seed: header.seed,
        })
    }
}

/// Written to a sibling temp file first, then renamed into place.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = ck.to_bytes()?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| HdError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| HdError::io(&tmp, e))?;
    f.sync_all().map_err(|e| HdError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HdError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| HdError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
