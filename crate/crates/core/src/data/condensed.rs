//! On-disk condensed dataset.
//!
//! ```text
//! <dir>/manifest.json         classes, ipc, resolution, labels, provenance,
//!                             payload dtype/order/count and its SHA-256
//! <dir>/images.bin            f32 little-endian, [N, 3, H, W] row-major,
//!                             class-major (all images of class_ids[0] first)
//! <dir>/previews/<class>/<k>.png   8-bit previews, never read back
//! ```

use std::fs;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::toy::to_rgb8;
use crate::data::{gather_images, Normalization, CHANNELS};
use crate::error::{Error, IoContext, Result};

pub const CONDENSED_VERSION: u32 = 1;

/// Where a condensed set came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub recover_config_hash: String,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondensedDataset {
    pub ipc: usize,
    /// Classes present, in storage order.
    pub class_ids: Vec<usize>,
    /// Width of the label space (the teacher's class count).
    pub num_classes: usize,
    pub resolution: usize,
    pub normalization: Normalization,
    pub images: Vec<f32>,
    pub hard_labels: Vec<usize>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    classes: usize,
    class_ids: Vec<usize>,
    ipc: usize,
    num_classes: usize,
    resolution: usize,
    channels: usize,
    normalization: Normalization,
    provenance: Provenance,
    images: Payload,
    hard_labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Payload {
    file: String,
    dtype: String,
    order: String,
    count: usize,
    sha256: String,
}

impl CondensedDataset {
    pub fn len(&self) -> usize {
        self.hard_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        gather_images(&self.images, self.resolution, indices)
    }

    /// Storage indices of the first `per_class` images of each listed class.
    pub fn indices_for_classes(&self, classes: &[usize], per_class: usize) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for &c in classes {
            let pos = self
                .class_ids
                .iter()
                .position(|&k| k == c)
                .ok_or_else(|| Error::config(format!("class {c} is not in the condensed set")))?;
            out.extend(pos * self.ipc..pos * self.ipc + per_class.min(self.ipc));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.class_ids.len() * self.ipc;
        if self.hard_labels.len() != n {
            return Err(Error::Integrity(format!(
                "{} labels for {} classes × ipc {}",
                self.hard_labels.len(),
                self.class_ids.len(),
                self.ipc
            )));
        }
        if self.images.len() != n * self.image_len() {
            return Err(Error::Integrity(format!(
                "{} pixels for {n} images of {}×{}",
                self.images.len(),
                self.resolution,
                self.resolution
            )));
        }
        for (i, &l) in self.hard_labels.iter().enumerate() {
            if l != self.class_ids[i / self.ipc] || l >= self.num_classes {
                return Err(Error::Integrity(format!("image {i} labelled {l} breaks the class-major layout")));
            }
        }
        if self.images.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity("non-finite pixel".into()));
        }
        Ok(())
    }

    /// SHA-256 of the little-endian pixel payload, as recorded in the manifest.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(payload(&self.images)))
    }

    /// Bytes of the float payload.
    pub fn payload_bytes(&self) -> u64 {
        self.images.len() as u64 * 4
    }
}

fn payload(images: &[f32]) -> Vec<u8> {
    images.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn save_condensed(cd: &CondensedDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    cd.validate()?;
    fs::create_dir_all(dir).at(dir)?;
    let bytes = payload(&cd.images);
    let manifest = Manifest {
        format_version: CONDENSED_VERSION,
        classes: cd.class_ids.len(),
        class_ids: cd.class_ids.clone(),
        ipc: cd.ipc,
        num_classes: cd.num_classes,
        resolution: cd.resolution,
        channels: CHANNELS,
        normalization: cd.normalization,
        provenance: cd.provenance.clone(),
        images: Payload {
            file: "images.bin".into(),
            dtype: "f32le".into(),
            order: "NCHW".into(),
            count: cd.len(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        },
        hard_labels: cd.hard_labels.clone(),
    };
    let bin = dir.join("images.bin");
    fs::write(&bin, &bytes).at(&bin)?;
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).at(&mpath)?;
    write_previews(cd, dir.join("previews"))
}

/// Render 8-bit previews, `<dir>/<class>/<k>.png`.
pub fn write_previews(cd: &CondensedDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for (pos, &c) in cd.class_ids.iter().enumerate() {
        let d = dir.join(c.to_string());
        fs::create_dir_all(&d).at(&d)?;
        for k in 0..cd.ipc {
            let img = to_rgb8(cd.image(pos * cd.ipc + k), cd.resolution, &cd.normalization);
            img.save(d.join(format!("{k}.png")))?;
        }
    }
    Ok(())
}

pub fn load_condensed(dir: impl AsRef<Path>) -> Result<CondensedDataset> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let raw = fs::read(&mpath).at(&mpath)?;
    let m: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::corrupt("condensed manifest", e.to_string()))?;
    if m.format_version != CONDENSED_VERSION {
        return Err(Error::Version {
            found: m.format_version,
            expected: CONDENSED_VERSION,
        });
    }
    let integrity = |msg: String| Err(Error::Integrity(format!("{}: {msg}", dir.display())));
    if m.channels != CHANNELS || m.images.dtype != "f32le" || m.images.order != "NCHW" {
        return integrity(format!("unsupported payload {} {} with {} channels", m.images.dtype, m.images.order, m.channels));
    }
    if m.classes != m.class_ids.len() {
        return integrity(format!("manifest lists {} classes but {} class ids", m.classes, m.class_ids.len()));
    }
    if m.images.count != m.classes * m.ipc {
        return integrity(format!("{} images stored but classes × ipc = {} × {}", m.images.count, m.classes, m.ipc));
    }
    let bin = dir.join(&m.images.file);
    let bytes = fs::read(&bin).at(&bin)?;
    let expected = m.images.count * CHANNELS * m.resolution * m.resolution * 4;
    if bytes.len() != expected {
        return integrity(format!("images.bin holds {} bytes, manifest implies {expected}", bytes.len()));
    }
    if hex::encode(Sha256::digest(&bytes)) != m.images.sha256 {
        return integrity("images.bin checksum mismatch".into());
    }
    let images = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let cd = CondensedDataset {
        ipc: m.ipc,
        class_ids: m.class_ids,
        num_classes: m.num_classes,
        resolution: m.resolution,
        normalization: m.normalization,
        images,
        hard_labels: m.hard_labels,
        provenance: m.provenance,
    };
    cd.validate()?;
    Ok(cd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::normalization_for;

    fn sample() -> CondensedDataset {
        let n = 2 * 3 * CHANNELS * 4 * 4;
        CondensedDataset {
            ipc: 3,
            class_ids: vec![4, 1],
            num_classes: 5,
            resolution: 4,
            normalization: normalization_for("toy").unwrap(),
            images: (0..n).map(|i| (i as f32 * 0.37).sin() * 2.0).collect(),
            hard_labels: vec![4, 4, 4, 1, 1, 1],
            provenance: Provenance {
                checkpoint_id: "abc".into(),
                recover_config_hash: "def".into(),
                iterations: 7,
                seed: 9,
            },
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cd = sample();
        save_condensed(&cd, dir.path()).unwrap();
        let back = load_condensed(dir.path()).unwrap();
        assert_eq!(back, cd);
        assert!(dir.path().join("previews/4/2.png").is_file());
        assert_eq!(cd.indices_for_classes(&[1], 2).unwrap(), vec![3, 4]);
    }

    #[test]
    fn tampered_ipc_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_condensed(&sample(), dir.path()).unwrap();
        let p = dir.path().join("manifest.json");
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        m["ipc"] = 2.into();
        fs::write(&p, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(load_condensed(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn previews_are_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_previews(&sample(), a.path()).unwrap();
        write_previews(&sample(), b.path()).unwrap();
        let f = |d: &Path| fs::read(d.join("1/0.png")).unwrap();
        assert_eq!(f(a.path()), f(b.path()));
    }
}
