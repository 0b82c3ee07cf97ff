//! Checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  "SRCKPT\0\0"
//! 8       4     format version (u32)
//! 12      8     header length H (u64)
//! 20      H     header, UTF-8 JSON: spec, optional ViT description, meta,
//!               precision, weight table [{name, shape}], BN channel counts
//! 20+H    ..    weights in table order, then for every BN layer its running
//!               mean followed by its running variance; each element is an
//!               f32 or f64 according to `precision`
//! end-32  32    SHA-256 of every preceding byte
//! ```

use std::io::Write as _;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::Augmentation;
use crate::data::Normalization;
use crate::error::{Error, IoContext, Result};
use crate::model_zoo::BackboneSpec;
use crate::nn::{BnLayerStats, NamedArray, VitDescription};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SRCKPT\0\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }

    pub fn from_dtype(dtype: DType) -> Result<Self> {
        match dtype {
            DType::F32 => Ok(Precision::F32),
            DType::F64 => Ok(Precision::F64),
            other => Err(Error::config(format!("unsupported weight dtype {other:?}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epochs_trained: usize,
    pub augmentations_used: Vec<Augmentation>,
    pub val_top1: Option<f64>,
    pub seed: u64,
    /// Normalization of the training data, reused when clamping and
    /// previewing recovered images.
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: BackboneSpec,
    pub vit: Option<VitDescription>,
    pub precision: Precision,
    pub parameters: Vec<NamedArray>,
    pub bn_stats: Vec<BnLayerStats>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: BackboneSpec,
    #[serde(default)]
    vit: Option<VitDescription>,
    meta: CheckpointMeta,
    precision: Precision,
    weights: Vec<WeightEntry>,
    bn_channels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            spec: self.spec.clone(),
            vit: self.vit.clone(),
            meta: self.meta.clone(),
            precision: self.precision,
            weights: self
                .parameters
                .iter()
                .map(|p| WeightEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
            bn_channels: self.bn_stats.iter().map(|s| s.running_mean.len()).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |values: &[f64]| {
            for &v in values {
                match self.precision {
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        };
        for p in &self.parameters {
            put(&p.data);
        }
        for s in &self.bn_stats {
            put(&s.running_mean);
            put(&s.running_var);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |why: &str| Error::corrupt("checkpoint", why.to_string());
        if bytes.len() < 20 + 32 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified)"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header length out of range"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end]).map_err(|e| corrupt(&format!("header: {e}")))?;
        let width = header.precision.width();
        let mut cursor = &body[header_end..];
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if cursor.len() < n * width {
                return Err(corrupt("payload shorter than header declares"));
            }
            let (head, rest) = cursor.split_at(n * width);
            cursor = rest;
            Ok(match header.precision {
                Precision::F32 => head
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Precision::F64 => head
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            })
        };
        let mut parameters = Vec::with_capacity(header.weights.len());
        for w in &header.weights {
            let n = w.shape.iter().product();
            parameters.push(NamedArray {
                name: w.name.clone(),
                shape: w.shape.clone(),
                data: take(n)?,
            });
        }
        let mut bn_stats = Vec::with_capacity(header.bn_channels.len());
        for (i, &c) in header.bn_channels.iter().enumerate() {
            bn_stats.push(BnLayerStats {
                layer_index: i,
                running_mean: take(c)?,
                running_var: take(c)?,
            });
        }
        if !cursor.is_empty() {
            return Err(corrupt("trailing bytes after payload"));
        }
        Ok(Self {
            spec: header.spec,
            vit: header.vit,
            precision: header.precision,
            parameters,
            bn_stats,
            meta: header.meta,
        })
    }

    /// Short content hash identifying this checkpoint in provenance records.
    pub fn id(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex::encode(&bytes[bytes.len() - 32..])[..16].to_string())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let mut f = std::fs::File::create(path).at(path)?;
    f.write_all(&bytes).at(path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).at(path)?;
    Checkpoint::from_bytes(&bytes)
}
