//! Checkpoint container: an 8-byte little-endian header length, a JSON
//! header, then every tensor as little-endian f32 in header order. Tensor
//! offsets count bytes from the start of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use cirlab_core::model::{LowRankSpec, Model, ModelConfig};
use cirlab_core::tokenizer::Vocab;
use cirlab_core::train::{LossRow, TrainConfig};
use cirlab_core::{Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::files::{read_bytes, write_bytes};

pub const FORMAT: &str = "cirlab-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Training provenance stored with the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    /// Stages applied so far, in order.
    pub stages: Vec<u8>,
    pub seed: u64,
    pub train: Option<TrainConfig>,
    pub loss_curve: Vec<LossRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    vocab: Vec<String>,
    low_rank: Option<LowRankSpec>,
    meta: RunMeta,
    tensors: Vec<TensorEntry>,
}

pub fn encode(model: &Model, meta: &RunMeta) -> Vec<u8> {
    let header = Header {
        format: FORMAT.to_string(),
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        low_rank: model.low_rank().cloned(),
        meta: meta.clone(),
        tensors: model
            .params()
            .iter()
            .scan(0, |offset, (n, t)| {
                let e = TensorEntry {
                    name: n.clone(),
                    shape: t.shape().dims().to_vec(),
                    offset: *offset,
                };
                *offset += t.numel() * 4;
                Some(e)
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = model.params().values().map(|t| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(8 + json.len() + payload);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params().values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<(Model, RunMeta)> {
    let bad = |d: &str| CliError::format(path, d);
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated header length"))?.try_into().unwrap();
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(8..8usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| CliError::format(path, e))?;
    if header.format != FORMAT {
        return Err(bad(&format!("unknown checkpoint format {:?}", header.format)));
    }
    let payload = &bytes[8 + hlen..];
    let mut params = BTreeMap::new();
    let mut at = 0;
    for e in &header.tensors {
        let shape = Shape::new(&e.shape).map_err(|err| CliError::format(path, err))?;
        if e.offset != at {
            return Err(bad(&format!("tensor {} at offset {} instead of {at}", e.name, e.offset)));
        }
        let n = shape.numel() * 4;
        let raw = at.checked_add(n).and_then(|end| payload.get(at..end)).ok_or_else(|| bad(&format!("payload ends inside tensor {}", e.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        at += n;
        params.insert(e.name.clone(), Tensor::new(shape, data).map_err(|err| CliError::format(path, err))?);
    }
    if at != payload.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    let vocab = Vocab::from_tokens(header.vocab).map_err(|e| CliError::format(path, e))?;
    let model = Model::from_parts(header.config, vocab, params, header.low_rank).map_err(|e| CliError::format(path, e))?;
    Ok((model, header.meta))
}

pub fn save(path: &Path, model: &Model, meta: &RunMeta) -> Result<Vec<u8>> {
    let bytes = encode(model, meta);
    write_bytes(path, &bytes)?;
    Ok(bytes)
}

pub fn load(path: &Path) -> Result<(Model, RunMeta)> {
    decode(path, &read_bytes(path)?)
}
