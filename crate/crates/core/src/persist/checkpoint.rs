//! Self-describing binary checkpoint.
//!
//! All integers are little-endian.
//!
//! | offset | size        | field                                   |
//! |--------|-------------|-----------------------------------------|
//! | 0      | 4           | magic `NEVO`                            |
//! | 4      | 2           | format version (1)                      |
//! | 6      | 1           | dtype tag (1 = f32)                     |
//! | 7      | 1           | reserved, 0                             |
//! | 8      | 4           | `S`, spec JSON length                   |
//! | 12     | 4           | `M`, metadata JSON length               |
//! | 16     | 8           | `d`, parameter count                    |
//! | 24     | `S`         | network spec, UTF-8 JSON                |
//! | 24+S   | `M`         | metadata, UTF-8 JSON                    |
//! | 24+S+M | `4·d`       | parameters, f32                         |
//! | end−4  | 4           | CRC-32 (IEEE) of every preceding byte   |
//!
//! The CRC covers the header and both JSON blocks as well as the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, write_atomic, PersistError};
use crate::network::{NetworkSpec, ParamVector};

pub const MAGIC: [u8; 4] = *b"NEVO";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
const DTYPE_F32: u8 = 1;

/// Provenance stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    /// `bp`, `de`, ...
    pub stage: String,
    /// Epoch for BP checkpoints, generation for DE ones.
    pub step: u64,
    /// Training loss or fitness at save time.
    pub loss: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParamVector<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(spec: NetworkSpec, params: ParamVector<f32>, meta: CheckpointMeta) -> Self {
        assert!(params.matches(&spec), "params do not fit the spec");
        Self { spec, params, meta }
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let spec = ckpt.spec.to_json();
    let meta = serde_json::to_string(&ckpt.meta).expect("metadata serializes");
    let d = ckpt.params.len();
    let mut out = Vec::with_capacity(HEADER_LEN + spec.len() + meta.len() + 4 * d + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(0);
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    out.extend_from_slice(meta.as_bytes());
    for v in ckpt.params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

/// Validates magic, version, dtype, declared lengths, CRC and `d` against
/// the embedded spec, in that order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, PersistError> {
    let found = bytes.len() as u64;
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut m = [0u8; 4];
        let n = bytes.len().min(4);
        m[..n].copy_from_slice(&bytes[..n]);
        return Err(PersistError::BadMagic { found: m });
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(PersistError::Length {
            expected: (HEADER_LEN + 4) as u64,
            found,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version > FORMAT_VERSION {
        return Err(PersistError::VersionTooNew {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    if version == 0 {
        return Err(PersistError::BadVersion(version));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(PersistError::Dtype(bytes[6]));
    }
    let spec_len = u32_at(bytes, 8) as u64;
    let meta_len = u32_at(bytes, 12) as u64;
    let d = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let expected = d
        .checked_mul(4)
        .and_then(|p| p.checked_add(HEADER_LEN as u64 + 4))
        .and_then(|t| t.checked_add(spec_len))
        .and_then(|t| t.checked_add(meta_len))
        .ok_or(PersistError::Overflow)?;
    if expected != found {
        return Err(PersistError::Length { expected, found });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32_at(bytes, bytes.len() - 4);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(PersistError::Crc { stored, computed });
    }

    let spec_end = HEADER_LEN + spec_len as usize;
    let meta_end = spec_end + meta_len as usize;
    let spec_text = std::str::from_utf8(&bytes[HEADER_LEN..spec_end])
        .map_err(|e| PersistError::Spec(crate::network::NetworkError::Json(e.to_string())))?;
    let spec = NetworkSpec::from_json(spec_text).map_err(PersistError::Spec)?;
    if d != spec.param_count() as u64 {
        return Err(PersistError::SpecLength {
            file: d,
            spec: spec.param_count(),
        });
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[spec_end..meta_end]).map_err(PersistError::Meta)?;
    let values = bytes[meta_end..body.len()]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let params = ParamVector::from_values(spec.layout().clone(), values).map_err(PersistError::Spec)?;
    Ok(Checkpoint { spec, params, meta })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), PersistError> {
    write_atomic(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PersistError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}
