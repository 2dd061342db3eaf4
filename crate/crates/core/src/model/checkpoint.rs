//! On-disk checkpoint bundle: `manifest.json` plus `weights.bin`.
//!
//! `weights.bin` holds raw little-endian values of each tensor in manifest
//! order, every tensor starting at a multiple of 64 bytes (zero padding in
//! between). Each manifest record carries the tensor's byte offset, byte
//! length and the CRC32C of exactly those bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_tensors, DenseCheckpoint, MoECheckpoint, ModelConfig, ModelRef, TensorMap};
use crate::error::{Error, Result};
use crate::moe::MoeSpec;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const ALIGN: u64 = 64;
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.bin";

/// Storage precision. Computation is always 64-bit; `F32` rounds on save.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn size(self) -> u64 {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::Config(format!(
                "unknown dtype `{other}` (expected f32 | f64)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BundleKind {
    Dense,
    Moe,
    /// One simulated rank's tiles; see the `shard.json` sidecar.
    Shard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub crc32c: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: BundleKind,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeSpec>,
    pub tensors: Vec<TensorRecord>,
}

fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::F64 => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        Dtype::F32 => t
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect(),
    }
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    }
}

/// Writes any named tensor set. Use [`save_checkpoint`] for schema-checked models.
pub fn save_bundle(
    dir: &Path,
    kind: BundleKind,
    config: &ModelConfig,
    moe: Option<&MoeSpec>,
    tensors: &TensorMap,
    dtype: Dtype,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut weights = Vec::new();
    let mut records = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let pad = (ALIGN - weights.len() as u64 % ALIGN) % ALIGN;
        weights.resize(weights.len() + pad as usize, 0u8);
        let bytes = encode(t, dtype);
        records.push(TensorRecord {
            name: name.clone(),
            dtype,
            shape: t.shape().to_vec(),
            offset: weights.len() as u64,
            length: bytes.len() as u64,
            crc32c: crc32c::crc32c(&bytes),
        });
        weights.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind,
        config: config.clone(),
        moe: moe.cloned(),
        tensors: records,
    };
    let wpath = dir.join(WEIGHTS);
    fs::write(&wpath, &weights).map_err(|e| Error::io(&wpath, e))?;
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    json.push('\n');
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Reads and integrity-checks a bundle without interpreting its schema.
pub fn load_bundle(dir: &Path) -> Result<(Manifest, TensorMap)> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let bad = |detail: String| Error::Manifest {
        path: mpath.clone(),
        detail,
    };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| bad("missing format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| bad(e.to_string()))?;

    let wpath = dir.join(WEIGHTS);
    let weights = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let size = weights.len() as u64;
    let mut tensors = TensorMap::with_capacity(manifest.tensors.len());
    let mut cursor = 0u64;
    for r in &manifest.tensors {
        let count: usize = r.shape.iter().product();
        let expected = count as u64 * r.dtype.size();
        if expected != r.length {
            return Err(Error::Length {
                tensor: r.name.clone(),
                shape: r.shape.clone(),
                expected,
                declared: r.length,
            });
        }
        if r.offset % ALIGN != 0 || r.offset < cursor {
            return Err(bad(format!(
                "tensor `{}` offset {} is unaligned or overlaps its predecessor",
                r.name, r.offset
            )));
        }
        let end = r.offset + r.length;
        if end > size {
            return Err(Error::Truncated {
                tensor: r.name.clone(),
                end,
                size,
            });
        }
        let bytes = &weights[r.offset as usize..end as usize];
        if crc32c::crc32c(bytes) != r.crc32c {
            return Err(Error::Checksum {
                tensor: r.name.clone(),
            });
        }
        let t = Tensor::new(r.shape.clone(), decode(bytes, r.dtype))?;
        if tensors.insert(r.name.clone(), t).is_some() {
            return Err(bad(format!("duplicate tensor `{}`", r.name)));
        }
        cursor = end;
    }
    if size > cursor.div_ceil(ALIGN) * ALIGN {
        return Err(bad(format!(
            "weights file has {} bytes beyond the last tensor",
            size - cursor
        )));
    }
    Ok((manifest, tensors))
}

/// Saves a schema-complete dense or MoE model.
pub fn save_checkpoint(dir: &Path, model: ModelRef<'_>, dtype: Dtype) -> Result<Manifest> {
    validate_tensors(model.config, model.moe, model.tensors)?;
    let kind = if model.moe.is_some() {
        BundleKind::Moe
    } else {
        BundleKind::Dense
    };
    save_bundle(dir, kind, model.config, model.moe, model.tensors, dtype)
}

pub fn load_checkpoint(dir: &Path) -> Result<DenseCheckpoint> {
    let (m, tensors) = load_bundle(dir)?;
    if m.kind != BundleKind::Dense || m.moe.is_some() {
        return Err(Error::Schema(format!(
            "{} holds a {:?} bundle, expected a dense checkpoint",
            dir.display(),
            m.kind
        )));
    }
    DenseCheckpoint::new(m.config, tensors)
}

pub fn load_moe_checkpoint(dir: &Path) -> Result<MoECheckpoint> {
    let (m, tensors) = load_bundle(dir)?;
    match (m.kind, m.moe) {
        (BundleKind::Moe, Some(spec)) => MoECheckpoint::new(m.config, spec, tensors),
        (kind, _) => Err(Error::Schema(format!(
            "{} holds a {kind:?} bundle, expected an MoE checkpoint",
            dir.display()
        ))),
    }
}
