//! Bit-exact checkpoint persistence.
//!
//! Layout: magic `POPCKPT1` · u32 little-endian header length · UTF-8 JSON
//! header (the config fields plus a tensor manifest of name/shape/offset/
//! count) · raw little-endian f64 data. Offsets are byte offsets from the
//! start of the data section. f64 bits pass through untouched, so
//! load∘save is bitwise identity.

use super::config::ModelConfig;
use super::weights::{LayerWeights, ModelWeights};
use crate::error::{PopError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;

const MAGIC: &[u8; 8] = b"POPCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    count: u64,
}

/// Serializes weights to the checkpoint byte format.
pub fn checkpoint_bytes(weights: &ModelWeights) -> Vec<u8> {
    let entries = weights.tensors();
    let mut metas = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for (name, t) in &entries {
        metas.push(TensorMeta {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            count: t.numel() as u64,
        });
        offset += 8 * t.numel() as u64;
    }
    let header = serde_json::to_vec(&Header {
        config: weights.config.clone(),
        tensors: metas,
    })
    .expect("header serializes");

    let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(weights)).map_err(|e| PopError::io(path, e))
}

/// Parses a checkpoint from raw bytes, validating magic, manifest shapes
/// against the embedded config, data bounds, and finiteness. Errors name
/// the offending tensor.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelWeights> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(PopError::Format(
            "not a checkpoint: bad magic bytes".into(),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if 12 + header_len > bytes.len() {
        return Err(PopError::Format(format!(
            "truncated header: declares {header_len} bytes, file has {}",
            bytes.len() - 12
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| PopError::Format(format!("header JSON: {e}")))?;
    header.config.validate()?;
    let data = &bytes[12 + header_len..];

    let expected = ModelWeights::expected_shapes(&header.config);
    let mut by_name: HashMap<&str, Tensor> = HashMap::with_capacity(expected.len());
    let manifest: HashMap<&str, &TensorMeta> = header
        .tensors
        .iter()
        .map(|m| (m.name.as_str(), m))
        .collect();
    if manifest.len() != header.tensors.len() {
        return Err(PopError::Format("duplicate tensor name in manifest".into()));
    }

    for (name, shape) in &expected {
        let meta = manifest
            .get(name.as_str())
            .ok_or_else(|| PopError::Format(format!("tensor {name} missing from manifest")))?;
        if &meta.shape != shape {
            return Err(PopError::Format(format!(
                "tensor {name}: manifest shape {:?} does not match config shape {:?}",
                meta.shape, shape
            )));
        }
        let count: usize = shape.iter().product();
        if meta.count as usize != count {
            return Err(PopError::Format(format!(
                "tensor {name}: count {} does not match shape {:?}",
                meta.count, meta.shape
            )));
        }
        let start = meta.offset as usize;
        let end = start + 8 * count;
        if end > data.len() {
            return Err(PopError::Format(format!(
                "tensor {name}: data truncated (needs bytes {start}..{end}, have {})",
                data.len()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for chunk in data[start..end].chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(PopError::Format(format!(
                "tensor {name} contains non-finite values"
            )));
        }
        by_name.insert(
            name.as_str(),
            Tensor::from_vec(shape, values).expect("validated above"),
        );
    }

    let mut take = |name: String| by_name.remove(name.as_str()).expect("collected above");
    let token_embedding = take("token_embedding".into());
    let mut layers = Vec::with_capacity(header.config.num_layers);
    for i in 0..header.config.num_layers {
        layers.push(LayerWeights {
            attn_norm: take(format!("layers.{i}.attn_norm")),
            wq: take(format!("layers.{i}.wq")),
            wk: take(format!("layers.{i}.wk")),
            wv: take(format!("layers.{i}.wv")),
            wo: take(format!("layers.{i}.wo")),
            ffn_norm: take(format!("layers.{i}.ffn_norm")),
            ffn_gate: take(format!("layers.{i}.ffn_gate")),
            ffn_up: take(format!("layers.{i}.ffn_up")),
            ffn_down: take(format!("layers.{i}.ffn_down")),
        });
    }
    Ok(ModelWeights {
        config: header.config,
        token_embedding,
        layers,
        final_norm: take("final_norm".into()),
        output_head: take("output_head".into()),
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| PopError::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Hex SHA-256 of the canonical checkpoint serialization; identifies the
/// exact weights an importance profile was computed from.
pub fn weights_hash(weights: &ModelWeights) -> String {
    let digest = Sha256::digest(checkpoint_bytes(weights));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
