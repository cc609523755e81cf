//! Checkpoint file: an 8-byte little-endian header length, a UTF-8 JSON
//! header (hyperparameters, tensor names, shapes, dtype, byte offsets,
//! payload hash), then the raw little-endian f32 payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ModelConfig, ModelParams};
use crate::train::AdamState;

const FORMAT: &str = "mdm-scaffold-checkpoint";
const VERSION: u32 = 1;
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte range `[start, end)` within the payload.
    pub offsets: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub step: usize,
    pub payload_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamState>,
    pub step: usize,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    step: usize,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    let shapes = params.config.tensor_shapes();
    let mut named: Vec<(String, Vec<usize>, &Vec<f32>)> = shapes
        .iter()
        .zip(params.tensors())
        .map(|((n, s), t)| (n.clone(), s.clone(), t))
        .collect();
    if let Some(opt) = optimizer {
        for (prefix, state) in [(OPTIM_M, &opt.m), (OPTIM_V, &opt.v)] {
            for ((n, s), t) in shapes.iter().zip(state.tensors()) {
                named.push((format!("{prefix}{n}"), s.clone(), t));
            }
        }
    }

    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, shape, data) in named {
        let start = payload.len();
        for x in data.iter() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f32".into(),
            offsets: [start, payload.len()],
        });
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        config: params.config,
        step,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 8 {
        return Err(err("file too short for header length"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() < len {
        return Err(err("header truncated"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])
        .map_err(|e| err(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(err(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    Ok((header, &body[len..]))
}

fn fill_tensors(
    target: &mut ModelParams<f32>,
    prefix: &str,
    header: &CheckpointHeader,
    payload: &[u8],
) -> Result<bool> {
    let shapes = target.config.tensor_shapes();
    let mut found_any = false;
    for ((name, shape), dst) in shapes.iter().zip(target.tensors_mut()) {
        let full = format!("{prefix}{name}");
        let Some(entry) = header.tensors.iter().find(|e| e.name == full) else {
            if prefix.is_empty() {
                return Err(err(format!("missing tensor {full:?}")));
            }
            return Ok(false);
        };
        found_any = true;
        if &entry.shape != shape {
            return Err(Error::TensorShape {
                name: full,
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
        if entry.dtype != "f32" {
            return Err(err(format!("tensor {full:?} has dtype {}", entry.dtype)));
        }
        let [start, end] = entry.offsets;
        if end < start || end > payload.len() || end - start != dst.len() * 4 {
            return Err(err(format!("tensor {full:?} has bad offsets")));
        }
        for (d, chunk) in dst.iter_mut().zip(payload[start..end].chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(found_any)
}

/// Loads a checkpoint; with `expected` set, every tensor must match that
/// configuration's shapes.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload) = read_header(&bytes)?;
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(err("payload hash mismatch (truncated or corrupted file)"));
    }
    let config = expected.copied().unwrap_or(header.config);
    let mut params = ModelParams::zeros(config);
    fill_tensors(&mut params, "", &header, payload)?;
    let mut m = ModelParams::zeros(config);
    let mut v = ModelParams::zeros(config);
    let optimizer = if fill_tensors(&mut m, OPTIM_M, &header, payload)?
        && fill_tensors(&mut v, OPTIM_V, &header, payload)?
    {
        Some(AdamState {
            step: header.step,
            m,
            v,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        params,
        optimizer,
        step: header.step,
    })
}
