//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic `VQSPKCHK`, `u32` format version, `u64` metadata
//! length, UTF-8 JSON metadata (config plus a tensor directory), raw
//! little-endian `f32` blobs, and a trailing CRC32 of every preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, VqVaeModel};
use crate::nn::Module;

pub const MAGIC: &[u8; 8] = b"VQSPKCHK";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub codebook_initialized: bool,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub crc32: u32,
    pub size_bytes: usize,
}

fn tensors(model: &VqVaeModel<f32>) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out: Vec<(String, Vec<usize>, &[f32])> = model
        .net
        .params()
        .into_iter()
        .map(|p| (p.name, p.shape, p.data))
        .collect();
    let cb = &model.codebook;
    out.push(("codebook.vectors".into(), cb.vectors.shape().to_vec(), cb.vectors.as_slice().unwrap()));
    out.push(("codebook.ema_counts".into(), cb.ema_counts.shape().to_vec(), cb.ema_counts.as_slice().unwrap()));
    out.push(("codebook.ema_sums".into(), cb.ema_sums.shape().to_vec(), cb.ema_sums.as_slice().unwrap()));
    out
}

/// Serializes a model to checkpoint bytes.
pub fn encode_checkpoint(model: &VqVaeModel<f32>) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut blobs = Vec::new();
    for (name, shape, data) in tensors(model) {
        entries.push(TensorEntry {
            name,
            dtype: "f32".into(),
            shape,
            offset: blobs.len(),
            length: data.len() * 4,
        });
        for v in data {
            blobs.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        config: model.config.clone(),
        codebook_initialized: model.codebook.initialized,
        tensors: entries,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blobs.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint(model: &VqVaeModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Validates framing and checksum, returning the metadata and the blob section.
fn parse(bytes: &[u8]) -> Result<(CheckpointInfo, &[u8])> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic".into()));
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::ChecksumMismatch);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let crc = crc32fast::hash(body);
    if crc != stored {
        return Err(Error::ChecksumMismatch);
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let meta_end = HEADER_LEN
        .checked_add(meta_len)
        .filter(|&end| end <= body.len())
        .ok_or_else(|| Error::MalformedCheckpoint("metadata runs past end".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&body[HEADER_LEN..meta_end])?;
    Ok((
        CheckpointInfo {
            version,
            meta,
            crc32: crc,
            size_bytes: bytes.len(),
        },
        &body[meta_end..],
    ))
}

/// Reads header, metadata and checksum without materializing the model.
pub fn inspect_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointInfo> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse(&bytes)?.0)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<VqVaeModel<f32>> {
    let (info, blobs) = parse(bytes)?;
    let meta = info.meta;
    let mut model = build_model::<f32>(&meta.config, 0)?;
    let lookup = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let entry = meta
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("missing tensor {name}")))?;
        if entry.shape != shape || entry.dtype != "f32" || entry.length != shape.iter().product::<usize>() * 4 {
            return Err(Error::MalformedCheckpoint(format!("tensor {name} has unexpected layout")));
        }
        let raw = blobs
            .get(entry.offset..entry.offset + entry.length)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("tensor {name} out of bounds")))?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    };
    let layout: Vec<(String, Vec<usize>)> = model.net.params().into_iter().map(|p| (p.name, p.shape)).collect();
    for ((name, shape), dst) in layout.iter().zip(model.net.params_mut()) {
        dst.copy_from_slice(&lookup(name, shape)?);
    }
    let cb = &mut model.codebook;
    let vectors = lookup("codebook.vectors", cb.vectors.shape())?;
    cb.vectors.as_slice_mut().unwrap().copy_from_slice(&vectors);
    let counts = lookup("codebook.ema_counts", cb.ema_counts.shape())?;
    cb.ema_counts.as_slice_mut().unwrap().copy_from_slice(&counts);
    let sums = lookup("codebook.ema_sums", cb.ema_sums.shape())?;
    cb.ema_sums.as_slice_mut().unwrap().copy_from_slice(&sums);
    cb.initialized = meta.codebook_initialized;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<VqVaeModel<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
