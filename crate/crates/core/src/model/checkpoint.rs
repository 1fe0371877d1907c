//! Checkpoint file: one line of JSON header, then the raw little-endian
//! f64 data of every tensor in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

const FORMAT: &str = "vampcf-checkpoint-1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Fingerprint of the item vocabulary the model was trained on.
    pub vocab_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    vocab_fingerprint: String,
    tensors: Vec<TensorEntry>,
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let named = ckpt.params.net.named();
    let header = Header {
        format: FORMAT.to_string(),
        config: ckpt.params.config.clone(),
        vocab_fingerprint: ckpt.vocab_fingerprint.clone(),
        tensors: named
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, m) in named {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split])
        .map_err(|e| bad(format!("unreadable header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(format!("unsupported format {:?}", header.format)));
    }
    let mut params = ModelParams::zeros(header.config)?;
    let mut body = &bytes[split + 1..];
    {
        let slots = params.net.named_mut();
        if slots.len() != header.tensors.len() {
            return Err(bad(format!(
                "header lists {} tensors, configuration implies {}",
                header.tensors.len(),
                slots.len()
            )));
        }
        for ((name, slot), entry) in slots.into_iter().zip(&header.tensors) {
            if name != entry.name || slot.shape() != (entry.rows, entry.cols) {
                return Err(bad(format!(
                    "tensor {} ({}x{}) does not fit {name} ({}x{})",
                    entry.name,
                    entry.rows,
                    entry.cols,
                    slot.rows(),
                    slot.cols()
                )));
            }
            let n = entry.rows * entry.cols * 8;
            if body.len() < n {
                return Err(bad(format!("data for {name} is truncated")));
            }
            let data = body[..n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            *slot = Matrix::new(entry.rows, entry.cols, data)?;
            body = &body[n..];
        }
    }
    if !body.is_empty() {
        return Err(bad(format!("{} trailing bytes", body.len())));
    }
    Ok(Checkpoint {
        params,
        vocab_fingerprint: header.vocab_fingerprint,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = checkpoint_bytes(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
