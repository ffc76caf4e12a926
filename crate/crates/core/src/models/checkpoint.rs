//! Single-file checkpoints.
//!
//! Layout (little-endian):
//! `magic[8] | version u32 | header_len u32 | header JSON | n_tensors u32 |
//! records | crc32 u32`, where each record is
//! `name_len u32 | name | dtype u8 | ndim u32 | dims u32* | f32 data` and the
//! CRC covers every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ReconModel, Result, Role};
use crate::chansim::ArrayConfig;
use crate::feedback::CodecKey;
use crate::fsutil::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LASCOCK1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epochs: u64,
    pub best_epoch: u64,
    pub seed: u64,
    pub dataset_ids: Vec<u32>,
    pub best_val_nmse: Option<f64>,
    /// Collaboration weight the proxy was trained with, if any.
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ReconModel<f32>,
    pub codec: Option<CodecKey>,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    role: Role,
    codec: Option<CodecKey>,
    meta: TrainingMeta,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let model = &ckpt.model;
    let header = Header {
        config: model.config,
        role: model.role,
        codec: ckpt.codec,
        meta: ckpt.meta.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(64 + header.len() + 4 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| ModelError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ModelError::Corrupt("missing checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(ModelError::Corrupt("checksum mismatch".into()));
    }

    let mut r = Reader { buf: body, pos: 12 };
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| ModelError::Corrupt(format!("header: {e}")))?;
    let mut model = ReconModel::<f32>::new(header.config, header.role, 0)
        .map_err(|e| ModelError::Corrupt(format!("stored config is invalid: {e}")))?;

    let n = r.u32()? as usize;
    if n != model.params.len() {
        return Err(ModelError::Corrupt(format!(
            "{n} tensors stored, config implies {}",
            model.params.len()
        )));
    }
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(ModelError::Corrupt(format!(
                "tensor {name}: unknown dtype tag {dtype}"
            )));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| ModelError::Corrupt(format!("unexpected tensor {name}")))?;
        let slot = model.params.get_mut(id);
        let count: usize = shape.iter().product();
        if count != slot.len() {
            return Err(ModelError::Corrupt(format!(
                "tensor {name}: shape {shape:?}"
            )));
        }
        let raw = r.take(4 * count)?;
        for (v, c) in slot.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        }
    }
    if r.pos != body.len() {
        return Err(ModelError::Corrupt("trailing bytes after tensors".into()));
    }
    Ok(Checkpoint {
        model,
        codec: header.codec,
        meta: header.meta,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads and checks the array dimensions and, when given, the codec.
pub fn load_checkpoint_expect(
    path: &Path,
    arr: &ArrayConfig,
    codec: Option<&CodecKey>,
) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let cfg = ckpt.model.config;
    if (cfg.n_tx, cfg.n_sc) != (arr.n_tx, arr.n_sc) {
        return Err(ModelError::ConfigMismatch(format!(
            "{} holds n_tx={} n_sc={}, requested n_tx={} n_sc={}",
            path.display(),
            cfg.n_tx,
            cfg.n_sc,
            arr.n_tx,
            arr.n_sc
        )));
    }
    if let Some(want) = codec {
        if ckpt.codec.as_ref() != Some(want) {
            return Err(ModelError::CodecMismatch {
                found: ckpt.codec,
                expected: *want,
            });
        }
    }
    Ok(ckpt)
}
