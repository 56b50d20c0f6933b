//! The `.mrga` container.
//!
//! ```text
//! "MRGA" | version: u32 LE (= 1) | header_len: u64 LE | header: UTF-8 JSON | payload
//! ```
//!
//! The header maps tensor names to `{dtype: "f32", shape, offset, nbytes}` and
//! carries a reserved `"meta"` object (`id`, `task_id`, `base_model_id`,
//! `alpha`, `rank`, `kind`, and `provenance` on merge outputs). Tensors are
//! row-major little-endian `f32`, packed back to back in parameter-name order.
//! A low-rank parameter `p` is stored as `p.lora_a` and `p.lora_b`, a dense one
//! as `p.delta`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::{AdapterUpdate, DenseUpdate, LowRankUpdate, ParamUpdate};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::merge::Provenance;

pub const MAGIC: &[u8; 4] = b"MRGA";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "mrga";

const META_KEY: &str = "meta";
const SUFFIX_A: &str = ".lora_a";
const SUFFIX_B: &str = ".lora_b";
const SUFFIX_DENSE: &str = ".delta";
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"MRGA\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}, expected {VERSION}")]
    UnsupportedVersion(u32),
    #[error("truncated {section}: expected {expected} bytes, found {actual}")]
    Truncated {
        section: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("payload holds {actual} bytes but the header declares {declared}")]
    TrailingBytes { declared: u64, actual: u64 },
    #[error("tensor `{tensor}` declares {declared} bytes but its shape needs {expected}")]
    LengthMismatch {
        tensor: String,
        declared: u64,
        expected: u64,
    },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("bad tensor layout: {0}")]
    Layout(String),
    #[error("low-rank entries disagree on {0}; one container stores a single alpha and rank")]
    MixedLoraConfig(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Lora,
    Dense,
    Mixed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    id: String,
    task_id: String,
    base_model_id: String,
    alpha: Option<f32>,
    rank: Option<usize>,
    kind: AdapterKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    dtype: String,
    shape: Vec<u64>,
    offset: u64,
    nbytes: u64,
}

pub fn encode_adapter(u: &AdapterUpdate) -> Result<Vec<u8>> {
    u.validate()?;
    let mut lora_cfg: Option<(f32, usize)> = None;
    let (mut n_lora, mut n_dense) = (0, 0);
    let mut tensors: Vec<(String, &Matrix)> = Vec::new();
    for (name, entry) in &u.entries {
        match entry {
            ParamUpdate::LowRank(lr) => {
                n_lora += 1;
                match lora_cfg {
                    None => lora_cfg = Some((lr.alpha(), lr.rank())),
                    Some((alpha, rank)) => {
                        if alpha.to_bits() != lr.alpha().to_bits() {
                            return Err(FormatError::MixedLoraConfig("alpha").into());
                        }
                        if rank != lr.rank() {
                            return Err(FormatError::MixedLoraConfig("rank").into());
                        }
                    }
                }
                tensors.push((format!("{name}{SUFFIX_A}"), lr.a()));
                tensors.push((format!("{name}{SUFFIX_B}"), lr.b()));
            }
            ParamUpdate::Dense(d) => {
                n_dense += 1;
                tensors.push((format!("{name}{SUFFIX_DENSE}"), &d.delta));
            }
        }
    }
    let kind = match (n_lora, n_dense) {
        (_, 0) if n_lora > 0 => AdapterKind::Lora,
        (0, _) => AdapterKind::Dense,
        _ => AdapterKind::Mixed,
    };

    let mut header = Map::new();
    let mut payload = Vec::new();
    for (name, m) in &tensors {
        let nbytes = (m.data().len() * 4) as u64;
        let info = TensorInfo {
            dtype: "f32".into(),
            shape: vec![m.rows() as u64, m.cols() as u64],
            offset: payload.len() as u64,
            nbytes,
        };
        for v in m.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        if header.insert(name.clone(), serde_json::to_value(info)?).is_some() {
            return Err(Error::InvalidAdapter(format!("duplicate tensor name `{name}`")));
        }
    }
    let meta = Meta {
        id: u.id.clone(),
        task_id: u.task_id.clone(),
        base_model_id: u.base_model_id.clone(),
        alpha: lora_cfg.map(|c| c.0),
        rank: lora_cfg.map(|c| c.1),
        kind,
        provenance: u.provenance.clone(),
    };
    if header.insert(META_KEY.into(), serde_json::to_value(meta)?).is_some() {
        return Err(Error::InvalidAdapter("tensor name collides with `meta`".into()));
    }
    let header = serde_json::to_vec(&Value::Object(header))?;

    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_adapter(bytes: &[u8]) -> Result<AdapterUpdate> {
    if bytes.len() < 4 {
        return Err(truncated("preamble", PREAMBLE, bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    if bytes.len() < PREAMBLE {
        return Err(truncated("preamble", PREAMBLE, bytes.len()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let rest = (bytes.len() - PREAMBLE) as u64;
    if header_len > rest {
        return Err(FormatError::Truncated {
            section: "header",
            expected: header_len,
            actual: rest,
        }
        .into());
    }
    let header_end = PREAMBLE + header_len as usize;
    let header: Map<String, Value> = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| FormatError::Header(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut meta: Option<Meta> = None;
    let mut infos: Vec<(String, TensorInfo)> = Vec::new();
    for (key, value) in header {
        if key == META_KEY {
            meta = Some(serde_json::from_value(value).map_err(|e| FormatError::Header(format!("meta: {e}")))?);
        } else {
            let info: TensorInfo = serde_json::from_value(value)
                .map_err(|e| FormatError::Header(format!("tensor `{key}`: {e}")))?;
            infos.push((key, info));
        }
    }
    let meta = meta.ok_or_else(|| FormatError::Header("missing `meta` object".into()))?;

    // Tensors must tile the payload contiguously from offset 0.
    infos.sort_by_key(|(_, i)| i.offset);
    let mut cursor = 0u64;
    for (name, info) in &infos {
        if info.dtype != "f32" {
            return Err(FormatError::Header(format!("tensor `{name}` has dtype `{}`", info.dtype)).into());
        }
        if info.shape.len() != 2 {
            return Err(FormatError::Header(format!("tensor `{name}` is not 2-D: {:?}", info.shape)).into());
        }
        let expected = info.shape.iter().try_fold(4u64, |acc, &d| acc.checked_mul(d));
        let expected = expected.ok_or_else(|| FormatError::Header(format!("tensor `{name}` shape overflows")))?;
        if info.nbytes != expected {
            return Err(FormatError::LengthMismatch {
                tensor: name.clone(),
                declared: info.nbytes,
                expected,
            }
            .into());
        }
        if info.offset != cursor {
            return Err(FormatError::Layout(format!(
                "tensor `{name}` starts at {} but the previous tensor ends at {cursor}",
                info.offset
            ))
            .into());
        }
        cursor += info.nbytes;
    }
    let actual = payload.len() as u64;
    if actual < cursor {
        return Err(FormatError::Truncated {
            section: "payload",
            expected: cursor,
            actual,
        }
        .into());
    }
    if actual > cursor {
        return Err(FormatError::TrailingBytes {
            declared: cursor,
            actual,
        }
        .into());
    }

    let mut matrices: BTreeMap<String, Matrix> = BTreeMap::new();
    for (name, info) in infos {
        let start = info.offset as usize;
        let data: Vec<f32> = payload[start..start + info.nbytes as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Matrix::new(info.shape[0] as usize, info.shape[1] as usize, data)?;
        matrices.insert(name, m);
    }

    let mut entries = BTreeMap::new();
    let names: Vec<String> = matrices.keys().cloned().collect();
    for name in names {
        let Some(m) = matrices.remove(&name) else { continue };
        if let Some(param) = name.strip_suffix(SUFFIX_DENSE) {
            entries.insert(param.to_string(), ParamUpdate::Dense(DenseUpdate { delta: m }));
        } else if let Some(param) = name.strip_suffix(SUFFIX_A) {
            let b = matrices
                .remove(&format!("{param}{SUFFIX_B}"))
                .ok_or_else(|| FormatError::Header(format!("`{name}` has no matching `{param}{SUFFIX_B}`")))?;
            let (alpha, rank) = match (meta.alpha, meta.rank) {
                (Some(a), Some(r)) => (a, r),
                _ => return Err(FormatError::Header("low-rank tensors without meta alpha/rank".into()).into()),
            };
            if m.rows() != rank {
                return Err(FormatError::Header(format!(
                    "`{name}` has rank {} but meta declares {rank}",
                    m.rows()
                ))
                .into());
            }
            entries.insert(param.to_string(), ParamUpdate::LowRank(LowRankUpdate::new(m, b, alpha)?));
        } else if name.ends_with(SUFFIX_B) {
            return Err(FormatError::Header(format!("`{name}` has no matching lora_a")).into());
        } else {
            return Err(FormatError::Header(format!("unrecognized tensor name `{name}`")).into());
        }
    }

    let mut u = AdapterUpdate::new(meta.id, meta.task_id, meta.base_model_id, entries)?;
    u.provenance = meta.provenance;
    Ok(u)
}

pub fn save_adapter(u: &AdapterUpdate, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_adapter(u)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<AdapterUpdate> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_adapter(&bytes)
}

fn truncated(section: &'static str, expected: usize, actual: usize) -> Error {
    FormatError::Truncated {
        section,
        expected: expected as u64,
        actual: actual as u64,
    }
    .into()
}
