//! Labeled image datasets and the condensed-dataset format.
//!
//! Images are held as `f32` in normalized space, `[N, 3, H, W]` row-major.

mod condensed;
mod ingest;
mod toy;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use condensed::{load_condensed, save_condensed, write_previews, CondensedDataset, Provenance, CONDENSED_VERSION};
pub use ingest::load_dataset;
pub use toy::{toy_dataset, write_image_folder, ToySpec};

pub const CHANNELS: usize = 3;

/// Per-channel mean and standard deviation for raw pixels in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Normalization {
    pub fn normalize(&self, raw: f64, channel: usize) -> f64 {
        (raw - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, value: f64, channel: usize) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }

    /// The normalized images of raw 0 and raw 1, per channel.
    pub fn unit_interval(&self) -> [(f64, f64); CHANNELS] {
        std::array::from_fn(|c| (self.normalize(0.0, c), self.normalize(1.0, c)))
    }
}

fn registry() -> &'static BTreeMap<String, Normalization> {
    static REG: OnceLock<BTreeMap<String, Normalization>> = OnceLock::new();
    REG.get_or_init(|| toml::from_str(include_str!("normalization.toml")).expect("bundled normalization table parses"))
}

/// Look up the normalization constants registered for a dataset name.
pub fn normalization_for(name: &str) -> Result<Normalization> {
    let key = name.to_ascii_lowercase().replace(['-', ' '], "_");
    registry().get(&key).copied().ok_or_else(|| {
        Error::config(format!(
            "no normalization registered for `{name}` (known: {})",
            registry().keys().cloned().collect::<Vec<_>>().join(", ")
        ))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "test" => Ok(Split::Val),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub split: Split,
    pub resolution: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub normalization: Normalization,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stack the given samples into a `[B, 3, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        gather_images(&self.images, self.resolution, indices)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// SHA-256 over the pixel payload and labels.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.images {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Samples whose label is in `classes`, original label ids kept.
    pub fn filter_classes(&self, classes: &[usize]) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.select(&keep)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            labels: self.batch_labels(indices),
            class_names: self.class_names.clone(),
            name: self.name.clone(),
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.len() * self.image_len() {
            return Err(Error::Structural(format!(
                "dataset `{}`: {} pixels for {} images of {}×{}",
                self.name,
                self.images.len(),
                self.len(),
                self.resolution,
                self.resolution
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Structural(format!(
                "dataset `{}`: label {bad} outside [0, {})",
                self.name, self.num_classes
            )));
        }
        Ok(())
    }
}

pub(crate) fn gather_images(images: &[f32], resolution: usize, indices: &[usize]) -> Result<Tensor> {
    let n = CHANNELS * resolution * resolution;
    let mut out = Vec::with_capacity(indices.len() * n);
    for &i in indices {
        out.extend_from_slice(&images[i * n..(i + 1) * n]);
    }
    Ok(Tensor::from_vec(out, (indices.len(), CHANNELS, resolution, resolution), &Device::Cpu)?)
}
