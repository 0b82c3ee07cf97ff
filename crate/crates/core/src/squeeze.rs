//! Stage 1: ordinary supervised training of the backbone that later drives
//! recovery and relabelling.

use candle_core::DType;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{self, Augmentation, CropParams};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model_zoo::{BackboneSpec, Checkpoint, CheckpointMeta, Network};
use crate::nn::{ParamMode, Pass};
use crate::optim::{cosine_lr, Optimizer, OptimizerConfig};
use crate::seed::{self, streams};
use crate::train::{cross_entropy, ensure_finite, epoch_order, one_hot, soft_cross_entropy, top1};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqueezeConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    /// Training budget in epochs.
    pub epochs: usize,
    #[serde(default)]
    pub augmentations: Vec<Augmentation>,
    #[serde(default = "default_mixup_alpha")]
    pub mixup_alpha: f64,
    #[serde(default = "default_cutmix_beta")]
    pub cutmix_beta: f64,
    #[serde(default)]
    pub crop: CropParams,
    #[serde(default)]
    pub seed: u64,
}

fn default_mixup_alpha() -> f64 {
    0.2
}

fn default_cutmix_beta() -> f64 {
    1.0
}

impl SqueezeConfig {
    /// Recipe keyed by input resolution: 32 px follows the CIFAR setting,
    /// 64 px the Tiny-ImageNet setting and 224 px the torchvision ImageNet
    /// schedule.
    pub fn for_resolution(resolution: usize) -> Self {
        let (optimizer, batch_size, epochs, aug) = match resolution {
            r if r <= 32 => (OptimizerConfig::sgd(0.1, 0.9, 5e-4), 128, 200, Augmentation::RandomCrop),
            r if r <= 64 => (OptimizerConfig::sgd(0.2, 0.9, 1e-4), 256, 100, Augmentation::RandomResizedCrop),
            _ => (OptimizerConfig::sgd(0.1, 0.9, 1e-4), 256, 90, Augmentation::RandomResizedCrop),
        };
        Self {
            optimizer,
            batch_size,
            epochs,
            augmentations: vec![aug],
            mixup_alpha: default_mixup_alpha(),
            cutmix_beta: default_cutmix_beta(),
            crop: CropParams::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("squeeze budget and batch size must be ≥ 1"));
        }
        if self.mixup_alpha <= 0.0 || self.cutmix_beta <= 0.0 {
            return Err(Error::config("mixing strengths must be positive"));
        }
        self.crop.validate()?;
        self.optimizer.validate()
    }
}

/// Train `spec` from scratch on `train` and report top-1 on `val`.
pub fn squeeze_train(train: &LabeledDataset, val: &LabeledDataset, spec: &BackboneSpec, cfg: &SqueezeConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    if train.resolution != spec.input_resolution || val.resolution != spec.input_resolution {
        return Err(Error::config(format!(
            "backbone expects {} px inputs, datasets are {} / {} px",
            spec.input_resolution, train.resolution, val.resolution
        )));
    }
    if train.num_classes != spec.num_classes {
        return Err(Error::config(format!(
            "backbone has {} classes, dataset {}",
            spec.num_classes, train.num_classes
        )));
    }
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let net = Network::new(spec, cfg.seed, DType::F32, ParamMode::Trainable)?;
    let mut opt = Optimizer::new(net.vars(), cfg.optimizer)?;
    let mixers: Vec<Augmentation> = cfg
        .augmentations
        .iter()
        .copied()
        .filter(|a| matches!(a, Augmentation::Mixup | Augmentation::Cutmix))
        .collect();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut step = 0;
    let mut last = String::from("none");
    for epoch in 0..cfg.epochs {
        let mut rng = seed::stream(cfg.seed, &[streams::AUGMENT, epoch as u64]);
        let mut epoch_loss = 0.0;
        for idx in epoch_order(train.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let mut x = train.batch(idx)?;
            let labels = train.batch_labels(idx);
            if cfg.augmentations.contains(&Augmentation::RandomResizedCrop) {
                x = augment::random_resized_crop_flip(&x, &cfg.crop, &mut rng)?;
            }
            if cfg.augmentations.contains(&Augmentation::RandomCrop) {
                x = augment::random_crop_flip(&x, 4, &mut rng)?;
            }
            let loss = if mixers.is_empty() {
                cross_entropy(&net.forward(&x, &mut Pass::train())?, &labels)?
            } else {
                let kind = mixers[rng.random_range(0..mixers.len())];
                let strength = match kind {
                    Augmentation::Mixup => cfg.mixup_alpha,
                    _ => cfg.cutmix_beta,
                };
                let targets = one_hot(&labels, spec.num_classes, DType::F32)?;
                let (x, t) = augment::mix_batch(&x, &targets, kind, strength, &mut rng)?;
                soft_cross_entropy(&net.forward(&x, &mut Pass::train())?, &t)?
            };
            let value = loss.to_scalar::<f32>()? as f64;
            ensure_finite(value, "squeeze", step, || last.clone())?;
            last = format!("step {step}, loss {value:.6}");
            epoch_loss += value;
            opt.step(&loss.backward()?, cosine_lr(cfg.optimizer.lr, step, total))?;
            step += 1;
        }
        log::info!("squeeze epoch {epoch}: mean loss {:.4}", epoch_loss / steps_per_epoch as f64);
    }
    let val_top1 = top1(&net, val, None)?;
    log::info!("squeeze done: val top-1 {:.4}", val_top1);
    net.to_checkpoint(CheckpointMeta {
        epochs_trained: cfg.epochs,
        augmentations_used: cfg.augmentations.clone(),
        val_top1: Some(val_top1),
        seed: cfg.seed,
        normalization: Some(train.normalization),
    })
}

/// Top-1 of a stored checkpoint on `val`, BN in inference mode.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, val: &LabeledDataset) -> Result<f64> {
    let net = Network::from_checkpoint(checkpoint, ParamMode::Frozen)?;
    top1(&net, val, None)
}
