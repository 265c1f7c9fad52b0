//! Model checkpoints.
//!
//! Layout: the 8-byte magic `ADAPRLCK`, the header length as a little-endian
//! u64, a JSON header, then every tensor's values as little-endian f64.
//! Header offsets count f64 values from the start of the data section.

use std::fs;
use std::path::Path;

use adaprl_core::data::QuantileBinner;
use adaprl_core::model::{MlpConfig, ModelPair, Network};
use adaprl_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::AppError;

const MAGIC: &[u8; 8] = b"ADAPRLCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    network: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: MlpConfig,
    #[serde(default)]
    binners: Vec<QuantileBinner>,
    tensors: Vec<TensorEntry>,
}

/// A trained model plus the preprocessing needed to feed it raw rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelPair,
    pub binners: Vec<QuantileBinner>,
}

fn networks(model: &ModelPair) -> [(&'static str, &Network); 2] {
    [("main", &model.main), ("aux", &model.aux)]
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (net, network) in networks(&ck.model) {
        for (name, t) in network.named_params() {
            tensors.push(TensorEntry {
                network: net.into(),
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            for v in t.values() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: ck.model.config.clone(),
        binners: ck.binners.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

fn bad(msg: impl Into<String>) -> AppError {
    AppError::Data(format!("invalid checkpoint: {}", msg.into()))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, AppError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    let data = &bytes[16 + len..];
    if !data.len().is_multiple_of(8) {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut model = ModelPair::init(header.config, 0)?;
    let mut used = 0;
    for (net, network) in [("main", &mut model.main), ("aux", &mut model.aux)] {
        let names: Vec<String> = network.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(network.params_mut()) {
            let entry = header
                .tensors
                .iter()
                .find(|e| e.network == net && &e.name == name)
                .ok_or_else(|| bad(format!("tensor {net}/{name} is missing")))?;
            if entry.shape != slot.shape() {
                return Err(bad(format!(
                    "tensor {net}/{name} has shape {:?}, the config needs {:?}",
                    entry.shape,
                    slot.shape()
                )));
            }
            let n = slot.len();
            let chunk = values
                .get(entry.offset..entry.offset.saturating_add(n))
                .ok_or_else(|| bad(format!("tensor {net}/{name} runs past the data section")))?;
            *slot = Tensor::new(entry.shape.clone(), chunk.to_vec()).map_err(|e| bad(e.to_string()))?;
            used += n;
        }
    }
    if header.tensors.len() != model.main.params().len() + model.aux.params().len() {
        return Err(bad("header lists tensors the config does not use"));
    }
    if used != values.len() {
        return Err(bad(format!(
            "data section holds {} values, tensors use {used}",
            values.len()
        )));
    }
    Ok(Checkpoint {
        model,
        binners: header.binners,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<(), AppError> {
    fs::write(path, encode(ck)).map_err(AppError::io(path))
}

pub fn load(path: &Path) -> Result<Checkpoint, AppError> {
    let bytes =
        fs::read(path).map_err(|e| AppError::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode(&bytes)
}
