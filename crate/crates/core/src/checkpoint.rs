//! Self-describing binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header, then
//! raw little-endian `f64` tensor data in header order. The header records
//! the model config, the hash of the vocabulary the model was trained with,
//! and every tensor's name and shape. Optimizer moments ride along as
//! `adam_m.*` / `adam_v.*` tensors so training can resume mid-run;
//! everything round-trips bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters};
use crate::tensor::Tensor;
use crate::vocab::hex_string;

const MAGIC: &[u8; 8] = b"CODRCKPT";
const VERSION: u32 = 1;

/// Optimizer state carried across a resume, aligned with
/// [`ModelParameters::for_each`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    /// Number of optimizer steps already taken.
    pub step: usize,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

/// Everything a checkpoint file holds.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub vocab_hash: String,
    pub trainer: Option<TrainerState>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    tensors: Vec<TensorRecord>,
    trainer_step: Option<usize>,
}

pub fn to_bytes(
    params: &ModelParameters,
    vocab_hash: &str,
    trainer: Option<&TrainerState>,
) -> Result<Vec<u8>> {
    let mut records = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    params.for_each(|name, t| {
        records.push(TensorRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        });
        payload.extend_from_slice(t.data());
    });
    if let Some(state) = trainer {
        if state.adam_m.len() != params.tensor_count() || state.adam_v.len() != params.tensor_count()
        {
            return Err(Error::Input(format!(
                "optimizer state holds {} moment tensors for a model with {}",
                state.adam_m.len(),
                params.tensor_count()
            )));
        }
        for (prefix, tensors) in [("adam_m", &state.adam_m), ("adam_v", &state.adam_v)] {
            let mut i = 0;
            params.for_each(|name, _| {
                let t = &tensors[i];
                records.push(TensorRecord {
                    name: format!("{prefix}.{name}"),
                    shape: t.shape().to_vec(),
                });
                i += 1;
            });
            for t in tensors.iter() {
                payload.extend_from_slice(t.data());
            }
        }
    }

    let header = Header {
        config: params.config.clone(),
        vocab_hash: vocab_hash.to_string(),
        tensors: records,
        trainer_step: trainer.map(|s| s.step),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Input(format!("cannot serialize checkpoint header: {e}")))?;

    let mut out = Vec::with_capacity(24 + header_json.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Input(format!("invalid checkpoint: {msg}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + header_len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[20..20 + header_len])
        .map_err(|e| bad(&format!("unreadable header: {e}")))?;

    let mut offset = 20 + header_len;
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(header.tensors.len());
    for rec in &header.tensors {
        let numel: usize = rec.shape.iter().product();
        let end = offset + numel * 8;
        if bytes.len() < end {
            return Err(bad(&format!("truncated data for tensor {}", rec.name)));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((rec.name.clone(), Tensor::new(rec.shape.clone(), data)?));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }

    let mut params = ModelParameters::init(header.config.clone())?;
    let mut take = |name: &str| -> Result<Tensor> {
        let pos = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| bad(&format!("missing tensor {name}")))?;
        Ok(tensors.remove(pos).1)
    };
    let mut names = Vec::new();
    params.for_each(|name, _| names.push(name.to_string()));
    {
        let mut restored = std::collections::BTreeMap::new();
        for name in &names {
            restored.insert(name.clone(), take(name)?);
        }
        let mut failure: Option<Error> = None;
        params.for_each_mut(|name, slot| {
            if failure.is_some() {
                return;
            }
            let t = restored.remove(name).expect("collected above");
            if t.shape() != slot.shape() {
                failure = Some(bad(&format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
                return;
            }
            *slot = t;
        });
        if let Some(e) = failure {
            return Err(e);
        }
    }

    let trainer = match header.trainer_step {
        None => None,
        Some(step) => {
            let mut adam_m = Vec::with_capacity(names.len());
            let mut adam_v = Vec::with_capacity(names.len());
            for name in &names {
                adam_m.push(take(&format!("adam_m.{name}"))?);
            }
            for name in &names {
                adam_v.push(take(&format!("adam_v.{name}"))?);
            }
            Some(TrainerState {
                step,
                adam_m,
                adam_v,
            })
        }
    };
    if !tensors.is_empty() {
        return Err(bad(&format!("unexpected tensor {}", tensors[0].0)));
    }

    Ok(Checkpoint {
        params,
        vocab_hash: header.vocab_hash,
        trainer,
    })
}

pub fn save(
    path: &Path,
    params: &ModelParameters,
    vocab_hash: &str,
    trainer: Option<&TrainerState>,
) -> Result<()> {
    fs::write(path, to_bytes(params, vocab_hash, trainer)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}

/// Hash of a checkpoint file on disk, recorded in index metadata.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
