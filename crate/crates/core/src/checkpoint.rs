//! Parameter checkpoints in a LIFQ-style tensor-block container.
//!
//! ```text
//! magic "LIFC" | version u16 = 1 | parameter count u32
//! per parameter: name length u16 | name UTF-8 | dtype u8 (2 = f64) | ndim u8
//!                | dims u32[ndim] | f64 data row-major
//! metadata length u32 | metadata JSON (UTF-8)
//! ```
//!
//! Parameter blocks appear in store order, and the names form the index used
//! when loading into a freshly built model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::{LabelScale, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LIFC";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub label_scale: LabelScale,
    pub seed: u64,
}

fn fmt_err(field: &'static str, detail: impl Into<String>) -> Error {
    Error::Format {
        field,
        detail: detail.into(),
    }
}

pub fn encode_checkpoint(store: &ParamStore, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(DTYPE_F64);
        buf.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(meta).map_err(|e| fmt_err("metadata", e.to_string()))?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    Ok(buf)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &encode_checkpoint(store, meta)?)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore, CheckpointMeta)> {
    let mut pos = 0usize;
    let mut take = |n: usize, field: &'static str| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(fmt_err(field, format!("truncated at byte {pos}")));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(fmt_err("magic", "expected \"LIFC\""));
    }
    let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fmt_err("version", format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(4, "parameter count")?.try_into().unwrap());
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(len, "name")?)
            .map_err(|e| fmt_err("name", e.to_string()))?
            .to_owned();
        let dtype = take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(fmt_err(
                "dtype",
                format!("expected {DTYPE_F64} (float64), found {dtype}"),
            ));
        }
        let ndim = take(1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(4, "dims")?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let data = take(numel * 8, "data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(name, Tensor::new(&shape, data)?);
    }
    let len = u32::from_le_bytes(take(4, "metadata length")?.try_into().unwrap()) as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(len, "metadata")?)
        .map_err(|e| fmt_err("metadata", e.to_string()))?;
    if pos != bytes.len() {
        return Err(fmt_err(
            "trailer",
            format!("{} unexpected trailing bytes", bytes.len() - pos),
        ));
    }
    Ok((store, meta))
}

pub fn read_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
