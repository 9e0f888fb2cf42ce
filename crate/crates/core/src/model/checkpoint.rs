//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `EGIPCKPT` |
//! | 4     | version `u32` (= 1) |
//! | 8     | header length `u64` |
//! | n     | UTF-8 JSON header: `{"config": ModelConfig, "seed": u64, "params": [{"name", "shape"}, ..]}` |
//! | ...   | parameter blobs as 32-bit floats, in header order |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::ModelConfig;
use super::predictor::PredictorModel;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EGIPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    params: Vec<ParamEntry>,
}

pub fn to_bytes(model: &PredictorModel<f32>) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config().clone(),
        seed: model.seed(),
        params: model
            .params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 4 * model.params.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.tensors() {
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<PredictorModel<f32>> {
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(12, "header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body])
        .map_err(|e| Error::format(20, format!("bad checkpoint header: {e}")))?;

    let mut model = PredictorModel::<f32>::new(header.config, header.seed)?;
    let expected: Vec<(&str, &[usize])> = model
        .params
        .iter()
        .map(|(n, t)| (n, t.shape()))
        .collect();
    let mut problems = Vec::new();
    if expected.len() != header.params.len() {
        problems.push(format!(
            "config implies {} parameters, header lists {}",
            expected.len(),
            header.params.len()
        ));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.params) {
        if *name != entry.name || *shape != entry.shape.as_slice() {
            problems.push(format!(
                "expected {name} {shape:?}, found {} {:?}",
                entry.name, entry.shape
            ));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let need = 4 * model.params.numel();
    let payload = &bytes[body..];
    if payload.len() != need {
        return Err(Error::format(
            body as u64,
            format!("payload has {} bytes, parameters need {need}", payload.len()),
        ));
    }
    let mut off = 0;
    let mut values = Vec::with_capacity(model.params.len());
    for t in model.params.tensors() {
        let n = t.len();
        values.push(
            payload[off..off + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
        off += 4 * n;
    }
    model.params.load_flat(values)?;
    Ok(model)
}

pub fn save(model: &PredictorModel<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<PredictorModel<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
