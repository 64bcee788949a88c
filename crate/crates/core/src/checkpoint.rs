//! Checkpoint file format: an 8-byte little-endian header length, a JSON
//! header (config, step, metrics snapshot, tensor manifest), then a raw
//! little-endian payload of every parameter and optimizer moment.
//! Save/load round trips are bit-exact.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dtype::{Dtype, Element};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::train::OptimizerState;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    /// Byte offset into the payload.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: Dtype,
    step: usize,
    opt_step: Option<u64>,
    model_config: ModelConfig,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: weights, optional optimizer state, training step,
/// and the free-form metrics snapshot written at save time.
pub struct Checkpoint<T: Element> {
    pub weights: ModelWeights<T>,
    pub state: Option<OptimizerState<T>>,
    pub step: usize,
    pub meta: serde_json::Value,
}

impl<T: Element> Checkpoint<T> {
    pub fn load(path: &Path) -> Result<Self> {
        load_checkpoint(path)
    }
}

fn push_tensor<T: Element>(
    entries: &mut Vec<TensorEntry>,
    payload: &mut Vec<u8>,
    name: String,
    shape: Vec<usize>,
    data: &[T],
) {
    entries.push(TensorEntry {
        name,
        shape,
        dtype: T::DTYPE,
        offset: payload.len() as u64,
        len: data.len() as u64,
    });
    for &v in data {
        payload.extend_from_slice(&v.to_le_bytes_vec());
    }
}

pub fn save_checkpoint<T: Element>(
    path: &Path,
    weights: &ModelWeights<T>,
    state: Option<&OptimizerState<T>>,
    step: usize,
    meta: &serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    weights.for_each_param(|m, data| {
        push_tensor(&mut entries, &mut payload, m.name, m.shape, data);
    });
    if let Some(state) = state {
        let metas = weights.param_metas();
        for (i, m) in metas.iter().enumerate() {
            push_tensor(
                &mut entries,
                &mut payload,
                format!("opt.m.{}", m.name),
                m.shape.clone(),
                &state.m[i],
            );
            push_tensor(
                &mut entries,
                &mut payload,
                format!("opt.v.{}", m.name),
                m.shape.clone(),
                &state.v[i],
            );
        }
    }
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        dtype: T::DTYPE,
        step,
        opt_step: state.map(|s| s.step),
        model_config: weights.config.clone(),
        meta: meta.clone(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

fn read_tensor<T: Element>(payload: &[u8], entry: &TensorEntry) -> Result<Vec<T>> {
    let width = T::byte_width();
    let start = entry.offset as usize;
    let bytes = (entry.len as usize)
        .checked_mul(width)
        .ok_or_else(|| integrity("tensor length overflows"))?;
    let end = start
        .checked_add(bytes)
        .ok_or_else(|| integrity("tensor extent overflows"))?;
    if end > payload.len() {
        return Err(integrity(format!(
            "tensor {} needs payload bytes {}..{} but only {} are present (truncated file?)",
            entry.name,
            start,
            end,
            payload.len()
        )));
    }
    if entry.dtype != T::DTYPE {
        return Err(integrity(format!(
            "tensor {} is {} but {} was requested",
            entry.name,
            entry.dtype,
            T::DTYPE
        )));
    }
    Ok(payload[start..end]
        .chunks_exact(width)
        .map(T::from_le_slice)
        .collect())
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let raw = fs::read(path)?;
    if raw.len() < 8 {
        return Err(integrity(format!(
            "{} is {} bytes; not a checkpoint",
            path.display(),
            raw.len()
        )));
    }
    let header_len = u64::from_le_bytes(raw[..8].try_into().expect("8 bytes")) as usize;
    if 8 + header_len > raw.len() {
        return Err(integrity(format!(
            "header claims {header_len} bytes but the file holds {} (truncated file?)",
            raw.len() - 8
        )));
    }
    let header: Header = serde_json::from_slice(&raw[8..8 + header_len])
        .map_err(|e| integrity(format!("unreadable header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(integrity(format!(
            "format version {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.dtype != T::DTYPE {
        return Err(integrity(format!(
            "checkpoint holds {} tensors but {} was requested",
            header.dtype,
            T::DTYPE
        )));
    }
    let payload = &raw[8 + header_len..];
    let expected_bytes: u64 = header
        .tensors
        .iter()
        .map(|t| t.len * T::byte_width() as u64)
        .sum();
    if payload.len() as u64 != expected_bytes {
        return Err(integrity(format!(
            "manifest requires {expected_bytes} payload bytes, file carries {} (truncated file?)",
            payload.len()
        )));
    }

    let by_name: HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    if by_name.len() != header.tensors.len() {
        return Err(integrity("duplicate tensor names in manifest"));
    }

    let mut weights = ModelWeights::<T>::allocate(&header.model_config)?;
    let mut fill_err: Option<Error> = None;
    weights.for_each_param_mut(|m, data| {
        if fill_err.is_some() {
            return;
        }
        match by_name.get(m.name.as_str()) {
            None => fill_err = Some(integrity(format!("missing tensor {}", m.name))),
            Some(entry) => {
                if entry.shape != m.shape {
                    fill_err = Some(integrity(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        m.name, entry.shape, m.shape
                    )));
                    return;
                }
                match read_tensor::<T>(payload, entry) {
                    Ok(values) => *data = values,
                    Err(e) => fill_err = Some(e),
                }
            }
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }

    let has_opt = header.tensors.iter().any(|t| t.name.starts_with("opt."));
    let state = if has_opt {
        let opt_step = header
            .opt_step
            .ok_or_else(|| integrity("optimizer tensors present but opt_step missing"))?;
        let mut state = OptimizerState::new(&weights);
        state.step = opt_step;
        let metas = weights.param_metas();
        for (i, m) in metas.iter().enumerate() {
            for (which, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
                let name = format!("opt.{which}.{}", m.name);
                let entry = by_name
                    .get(name.as_str())
                    .ok_or_else(|| integrity(format!("missing tensor {name}")))?;
                *slot = read_tensor::<T>(payload, entry)?;
            }
        }
        Some(state)
    } else {
        None
    };

    Ok(Checkpoint {
        weights,
        state,
        step: header.step,
        meta: header.meta,
    })
}
