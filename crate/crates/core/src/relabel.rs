//! Stage 3: pre-generated crop-level soft labels.
//!
//! For every condensed image and every future training epoch a crop
//! rectangle and flip are drawn from a pure schedule, the teacher labels the
//! resized crop in inference mode, and `softmax(logits / τ)` is stored.
//!
//! Archive byte layout (little-endian):
//!
//! ```text
//! 8       magic "SRLABEL\0"
//! 4       format version (u32)
//! 8       header length H (u64)
//! H       JSON header (ArchiveMeta)
//! ...     for each image, for each epoch, one record:
//!           u32 epoch, u32 top, u32 left, u32 height, u32 width, u8 hflip,
//!           label payload:
//!             dense_f32  num_classes × f32
//!             dense_f16  num_classes × f16
//!             top_k      k × (u32 class, f32 probability)
//! 32      SHA-256 of every preceding byte
//! ```

use std::path::Path;

use candle_core::DType;
use half::f16;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{crop_resize, sample_crop, CropParams, CropRect};
use crate::data::CondensedDataset;
use crate::error::{Error, IoContext, Result};
use crate::model_zoo::{Checkpoint, Network};
use crate::nn::{ParamMode, Pass};
use crate::seed::{self, streams};

pub const ARCHIVE_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SRLABEL\0";

/// The deterministic crop schedule shared by relabelling and student
/// training: the draw for `(image, epoch)` depends on nothing else.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropPlan {
    pub num_images: usize,
    pub epochs: usize,
    pub resolution: usize,
    pub params: CropParams,
    pub seed: u64,
}

impl CropPlan {
    pub fn draw(&self, image: usize, epoch: usize) -> (CropRect, bool) {
        let mut rng = seed::stream(self.seed, &[streams::CROP_PLAN, image as u64, epoch as u64]);
        let rect = sample_crop(&mut rng, self.resolution, self.resolution, &self.params);
        (rect, rng.random_bool(0.5))
    }
}

pub fn generate_crop_plan(num_images: usize, epochs: usize, params: CropParams, resolution: usize, seed: u64) -> Result<CropPlan> {
    params.validate()?;
    if resolution == 0 {
        return Err(Error::config("crop plan needs a positive resolution"));
    }
    Ok(CropPlan {
        num_images,
        epochs,
        resolution,
        params,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LabelPrecision {
    DenseF32,
    DenseF16,
    TopK { k: usize },
}

impl Default for LabelPrecision {
    fn default() -> Self {
        LabelPrecision::DenseF16
    }
}

impl std::str::FromStr for LabelPrecision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "dense_f32" => Ok(LabelPrecision::DenseF32),
            "f16" | "dense_f16" => Ok(LabelPrecision::DenseF16),
            other => match other.strip_prefix("top") {
                Some(k) => Ok(LabelPrecision::TopK {
                    k: k.trim_start_matches(['_', '-']).parse().map_err(|_| Error::config(format!("bad top-k precision `{other}`")))?,
                }),
                None => Err(Error::config(format!("unknown label precision `{other}`"))),
            },
        }
    }
}

/// A stored label vector.
#[derive(Debug, Clone, PartialEq)]
pub enum SoftLabel {
    Dense32(Vec<f32>),
    Dense16(Vec<f16>),
    /// Largest `k` probabilities; the residual mass is spread evenly over
    /// the remaining classes on read.
    TopK {
        num_classes: usize,
        entries: Vec<(u32, f32)>,
    },
}

impl SoftLabel {
    pub fn encode(probs: &[f64], precision: LabelPrecision) -> Self {
        match precision {
            LabelPrecision::DenseF32 => SoftLabel::Dense32(probs.iter().map(|&p| p as f32).collect()),
            LabelPrecision::DenseF16 => SoftLabel::Dense16(probs.iter().map(|&p| f16::from_f64(p)).collect()),
            LabelPrecision::TopK { k } => {
                let mut idx: Vec<usize> = (0..probs.len()).collect();
                idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
                idx.truncate(k.min(probs.len()));
                idx.sort_unstable();
                SoftLabel::TopK {
                    num_classes: probs.len(),
                    entries: idx.into_iter().map(|i| (i as u32, probs[i] as f32)).collect(),
                }
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            SoftLabel::Dense32(v) => v.len(),
            SoftLabel::Dense16(v) => v.len(),
            SoftLabel::TopK { num_classes, .. } => *num_classes,
        }
    }

    /// The stored distribution, renormalized to sum to one.
    pub fn probs(&self) -> Vec<f64> {
        let mut p: Vec<f64> = match self {
            SoftLabel::Dense32(v) => v.iter().map(|&x| x as f64).collect(),
            SoftLabel::Dense16(v) => v.iter().map(|x| x.to_f64()).collect(),
            SoftLabel::TopK { num_classes, entries } => {
                let kept: f64 = entries.iter().map(|e| e.1 as f64).sum();
                let rest = num_classes - entries.len();
                let fill = if rest > 0 { (1.0 - kept).max(0.0) / rest as f64 } else { 0.0 };
                let mut p = vec![fill; *num_classes];
                for &(i, v) in entries {
                    p[i as usize] = v as f64;
                }
                p
            }
        };
        let s: f64 = p.iter().sum();
        if s > 0.0 {
            p.iter_mut().for_each(|v| *v /= s);
        }
        p
    }

    pub fn argmax(&self) -> usize {
        let p = self.probs();
        (0..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropRecord {
    pub epoch: usize,
    pub rect: CropRect,
    pub hflip: bool,
    pub soft_label: SoftLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub teacher_id: String,
    /// Checksum of the condensed pixels the labels belong to.
    pub images_sha256: String,
    pub temperature: f64,
    pub epochs: usize,
    pub crop: CropParams,
    pub precision: LabelPrecision,
    pub seed: u64,
    pub num_images: usize,
    pub num_classes: usize,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropLabelArchive {
    pub meta: ArchiveMeta,
    /// `records[image][epoch]`.
    pub records: Vec<Vec<CropRecord>>,
}

impl CropLabelArchive {
    pub fn plan(&self) -> CropPlan {
        CropPlan {
            num_images: self.meta.num_images,
            epochs: self.meta.epochs,
            resolution: self.meta.resolution,
            params: self.meta.crop,
            seed: self.meta.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.len() != self.meta.num_images {
            return Err(Error::Integrity(format!(
                "archive lists {} images, meta says {}",
                self.records.len(),
                self.meta.num_images
            )));
        }
        for (i, recs) in self.records.iter().enumerate() {
            if recs.len() != self.meta.epochs {
                return Err(Error::Integrity(format!("image {i} has {} records, expected {}", recs.len(), self.meta.epochs)));
            }
            for (e, r) in recs.iter().enumerate() {
                if r.epoch != e || !r.rect.fits(self.meta.resolution, self.meta.resolution) || r.soft_label.num_classes() != self.meta.num_classes {
                    return Err(Error::Integrity(format!("image {i} epoch {e}: malformed record")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelConfig {
    #[serde(default = "default_tau")]
    pub temperature: f64,
    pub epochs: usize,
    #[serde(default)]
    pub crop: CropParams,
    #[serde(default)]
    pub precision: LabelPrecision,
    #[serde(default)]
    pub seed: u64,
}

fn default_tau() -> f64 {
    20.0
}

impl RelabelConfig {
    /// τ = 30 for the 32 px recipe, 20 otherwise.
    pub fn for_resolution(resolution: usize, epochs: usize) -> Self {
        Self {
            temperature: if resolution <= 32 { 30.0 } else { 20.0 },
            epochs,
            crop: CropParams::default(),
            precision: LabelPrecision::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.epochs == 0 {
            return Err(Error::config("relabel needs at least one epoch"));
        }
        if let LabelPrecision::TopK { k } = self.precision {
            if k == 0 {
                return Err(Error::config("top-k precision needs k ≥ 1"));
            }
        }
        self.crop.validate()
    }
}

/// `softmax(logits / τ)` in double precision.
pub fn tempered_softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| ((z - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Label every image of `cd` once per epoch with the teacher.
pub fn relabel(cd: &CondensedDataset, teacher: &Checkpoint, cfg: &RelabelConfig) -> Result<CropLabelArchive> {
    cfg.validate()?;
    if teacher.spec.input_resolution != cd.resolution {
        return Err(Error::config(format!(
            "teacher expects {} px crops but condensed images are {} px",
            teacher.spec.input_resolution, cd.resolution
        )));
    }
    if teacher.spec.num_classes != cd.num_classes {
        return Err(Error::config(format!(
            "teacher has {} classes, condensed label space has {}",
            teacher.spec.num_classes, cd.num_classes
        )));
    }
    let net = Network::from_checkpoint(teacher, ParamMode::Frozen)?;
    let plan = generate_crop_plan(cd.len(), cfg.epochs, cfg.crop, cd.resolution, cfg.seed)?;
    let mut records: Vec<Vec<CropRecord>> = (0..cd.len()).map(|_| Vec::with_capacity(cfg.epochs)).collect();
    let all: Vec<usize> = (0..cd.len()).collect();
    for epoch in 0..cfg.epochs {
        for chunk in all.chunks(256) {
            let draws: Vec<(CropRect, bool)> = chunk.iter().map(|&i| plan.draw(i, epoch)).collect();
            let rects: Vec<CropRect> = draws.iter().map(|d| d.0).collect();
            let flips: Vec<bool> = draws.iter().map(|d| d.1).collect();
            let x = crop_resize(&cd.batch(chunk)?, &rects, &flips, cd.resolution)?;
            let logits: Vec<Vec<f64>> = net.forward(&x, &mut Pass::eval())?.to_dtype(DType::F64)?.to_vec2()?;
            for ((&i, (rect, hflip)), z) in chunk.iter().zip(draws).zip(logits) {
                records[i].push(CropRecord {
                    epoch,
                    rect,
                    hflip,
                    soft_label: SoftLabel::encode(&tempered_softmax(&z, cfg.temperature), cfg.precision),
                });
            }
        }
    }
    Ok(CropLabelArchive {
        meta: ArchiveMeta {
            teacher_id: teacher.id()?,
            images_sha256: cd.checksum(),
            temperature: cfg.temperature,
            epochs: cfg.epochs,
            crop: cfg.crop,
            precision: cfg.precision,
            seed: cfg.seed,
            num_images: cd.len(),
            num_classes: cd.num_classes,
            resolution: cd.resolution,
        },
        records,
    })
}

pub fn archive_to_bytes(archive: &CropLabelArchive) -> Result<Vec<u8>> {
    archive.validate()?;
    let header = serde_json::to_vec(&archive.meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for recs in &archive.records {
        for r in recs {
            for v in [r.epoch, r.rect.top, r.rect.left, r.rect.height, r.rect.width] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            out.push(r.hflip as u8);
            match (&r.soft_label, archive.meta.precision) {
                (SoftLabel::Dense32(v), LabelPrecision::DenseF32) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                (SoftLabel::Dense16(v), LabelPrecision::DenseF16) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                (SoftLabel::TopK { entries, .. }, LabelPrecision::TopK { k }) if entries.len() == k.min(archive.meta.num_classes) => {
                    for (i, p) in entries {
                        out.extend_from_slice(&i.to_le_bytes());
                        out.extend_from_slice(&p.to_le_bytes());
                    }
                }
                _ => return Err(Error::Integrity("record precision differs from the archive's".into())),
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::corrupt("label archive", "payload shorter than header declares"));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn archive_from_bytes(bytes: &[u8]) -> Result<CropLabelArchive> {
    let corrupt = |why: &str| Error::corrupt("label archive", why.to_string());
    if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != ARCHIVE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: ARCHIVE_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified)"));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header length out of range"))?;
    let meta: ArchiveMeta = serde_json::from_slice(&body[20..end]).map_err(|e| corrupt(&e.to_string()))?;
    let mut r = Reader { buf: &body[end..] };
    let k = meta.num_classes;
    let mut records = Vec::with_capacity(meta.num_images);
    for _ in 0..meta.num_images {
        let mut recs = Vec::with_capacity(meta.epochs);
        for _ in 0..meta.epochs {
            let epoch = r.u32()? as usize;
            let rect = CropRect {
                top: r.u32()? as usize,
                left: r.u32()? as usize,
                height: r.u32()? as usize,
                width: r.u32()? as usize,
            };
            let hflip = r.take(1)?[0] != 0;
            let soft_label = match meta.precision {
                LabelPrecision::DenseF32 => SoftLabel::Dense32((0..k).map(|_| r.f32()).collect::<Result<_>>()?),
                LabelPrecision::DenseF16 => SoftLabel::Dense16(
                    r.take(2 * k)?
                        .chunks_exact(2)
                        .map(|c| f16::from_le_bytes([c[0], c[1]]))
                        .collect(),
                ),
                LabelPrecision::TopK { k: top } => SoftLabel::TopK {
                    num_classes: k,
                    entries: (0..top.min(k)).map(|_| Ok((r.u32()?, r.f32()?))).collect::<Result<_>>()?,
                },
            };
            recs.push(CropRecord {
                epoch,
                rect,
                hflip,
                soft_label,
            });
        }
        records.push(recs);
    }
    if !r.buf.is_empty() {
        return Err(corrupt("trailing bytes after records"));
    }
    let archive = CropLabelArchive { meta, records };
    archive.validate()?;
    Ok(archive)
}

/// Write the archive and return its size in bytes.
pub fn save_archive(archive: &CropLabelArchive, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = archive_to_bytes(archive)?;
    std::fs::write(path, &bytes).at(path)?;
    Ok(bytes.len() as u64)
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<CropLabelArchive> {
    let path = path.as_ref();
    archive_from_bytes(&std::fs::read(path).at(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tempered_softmax_hand_case() {
        let p = tempered_softmax(&[2.0, 0.0], 2.0);
        assert!((p[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((p[1] - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn top_k_reconstructs_a_distribution() {
        let raw: Vec<f64> = (0..120).map(|i| ((i * 37 % 101) as f64 + 1.0).powi(2)).collect();
        let s: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let label = SoftLabel::encode(&probs, LabelPrecision::TopK { k: 10 });
        let back = label.probs();
        assert!((back.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(back.iter().all(|&v| v >= 0.0));
        assert_eq!(label.argmax(), SoftLabel::encode(&probs, LabelPrecision::DenseF32).argmax());
    }

    #[test]
    fn precision_parses() {
        assert_eq!("top10".parse::<LabelPrecision>().unwrap(), LabelPrecision::TopK { k: 10 });
        assert_eq!("f16".parse::<LabelPrecision>().unwrap(), LabelPrecision::DenseF16);
        assert!("bf16".parse::<LabelPrecision>().is_err());
    }
}
