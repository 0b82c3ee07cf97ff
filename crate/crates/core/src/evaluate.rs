//! Student training on a condensed set with archived crop-level soft labels.
//!
//! Each epoch `e` reuses exactly the crop and flip stored for `(image, e)`,
//! so a student sees the same views the teacher labelled.

use std::io::Write as _;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{self, crop_resize, Augmentation, CropRect};
use crate::data::{CondensedDataset, LabeledDataset};
use crate::error::{Error, IoContext, Result};
use crate::model_zoo::{BackboneSpec, Checkpoint, CheckpointMeta, Network};
use crate::nn::{log_softmax, ParamMode, Pass};
use crate::optim::{cosine_lr, Optimizer, OptimizerConfig};
use crate::relabel::CropLabelArchive;
use crate::seed::{self, streams};
use crate::train::{cross_entropy, ensure_finite, epoch_order, mask_logits, one_hot, soft_cross_entropy, top1};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutmixConfig {
    pub enabled: bool,
    /// Probability of mixing a given batch.
    pub p: f64,
    pub beta: f64,
}

impl Default for CutmixConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            p: 1.0,
            beta: 1.0,
        }
    }
}

/// What the student is fitted to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// KL to the archived soft label (cross-entropy against it).
    #[default]
    Soft,
    /// Cross-entropy against the argmax of the archived label.
    ArchiveArgmax,
    /// Cross-entropy against the class each condensed image was recovered for.
    HardLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub student: BackboneSpec,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    #[serde(default)]
    pub cutmix: CutmixConfig,
    #[serde(default)]
    pub targets: TargetMode,
    /// Validation cadence in epochs; the last epoch is always evaluated.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_eval_every() -> usize {
    1
}

impl EvalConfig {
    /// 32 px: SGD 0.1, 400 epochs. 64 px: the squeeze recipe (SGD 0.2,
    /// 100 epochs). 224 px: AdamW 1e-3, wd 0.01, batch 1024, 300 epochs,
    /// CutMix with p = 1, β = 1.
    pub fn for_resolution(student: BackboneSpec) -> Self {
        let res = student.input_resolution;
        let (optimizer, batch_size, epochs, cutmix) = match res {
            r if r <= 32 => (OptimizerConfig::sgd(0.1, 0.9, 5e-4), 128, 400, false),
            r if r <= 64 => (OptimizerConfig::sgd(0.2, 0.9, 1e-4), 256, 100, false),
            _ => (OptimizerConfig::adamw(1e-3, (0.9, 0.999), 0.01), 1024, 300, true),
        };
        Self {
            student,
            epochs,
            optimizer,
            batch_size,
            cutmix: CutmixConfig {
                enabled: cutmix,
                ..CutmixConfig::default()
            },
            targets: TargetMode::Soft,
            eval_every: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("evaluation epochs, batch size and cadence must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.cutmix.p) || self.cutmix.beta <= 0.0 {
            return Err(Error::config("cutmix needs p in [0, 1] and β > 0"));
        }
        self.student.validate_structure()?;
        self.optimizer.validate()
    }
}

/// `−Σ t log softmax(z)`, averaged over rows when given a batch.
pub fn kd_loss(student_logits: &Tensor, soft_targets: &Tensor) -> Result<Tensor> {
    if student_logits.rank() == 1 {
        let t = soft_targets.to_dtype(student_logits.dtype())?;
        let lp = log_softmax(&student_logits.unsqueeze(0)?)?.squeeze(0)?;
        return Ok((lp * t)?.sum_all()?.neg()?);
    }
    soft_cross_entropy(student_logits, soft_targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StudentReport {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStat>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub final_top1: Option<f64>,
}

/// Train a fresh student on every image of `cd`.
pub fn train_student(cd: &CondensedDataset, archive: &CropLabelArchive, cfg: &EvalConfig, val: Option<&LabeledDataset>) -> Result<StudentReport> {
    let all: Vec<usize> = (0..cd.len()).collect();
    train_student_on(cd, archive, cfg, &all, None, val)
}

/// Train on the images listed in `indices`. With `allowed`, logits outside
/// those classes are masked and soft labels are renormalized over them.
pub fn train_student_on(
    cd: &CondensedDataset,
    archive: &CropLabelArchive,
    cfg: &EvalConfig,
    indices: &[usize],
    allowed: Option<&[usize]>,
    val: Option<&LabeledDataset>,
) -> Result<StudentReport> {
    cfg.validate()?;
    check_pairing(cd, archive, cfg)?;
    if indices.is_empty() || indices.iter().any(|&i| i >= cd.len()) {
        return Err(Error::config("student training indices are empty or out of range"));
    }
    let k = cd.num_classes;
    let net = Network::new(&cfg.student, cfg.seed, DType::F32, ParamMode::Trainable)?;
    let mut opt = Optimizer::new(net.vars(), cfg.optimizer)?;
    let steps_per_epoch = indices.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(total);
    let mut last = String::from("none");
    for epoch in 0..cfg.epochs {
        let mut rng = seed::stream(cfg.seed, &[streams::CUTMIX, epoch as u64]);
        let mut sum = 0.0;
        for chunk in epoch_order(indices.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&j| indices[j]).collect();
            let recs: Vec<_> = idx.iter().map(|&i| &archive.records[i][epoch]).collect();
            let rects: Vec<CropRect> = recs.iter().map(|r| r.rect).collect();
            let flips: Vec<bool> = recs.iter().map(|r| r.hflip).collect();
            let x = crop_resize(&cd.batch(&idx)?, &rects, &flips, cd.resolution)?;
            let probs: Vec<Vec<f64>> = recs.iter().map(|r| restrict(r.soft_label.probs(), allowed)).collect();
            let hard: Option<Vec<usize>> = match cfg.targets {
                TargetMode::Soft => None,
                TargetMode::ArchiveArgmax => Some(probs.iter().map(|p| argmax(p)).collect()),
                TargetMode::HardLabels => Some(idx.iter().map(|&i| cd.hard_labels[i]).collect()),
            };
            let mix = cfg.cutmix.enabled && rng.random_bool(cfg.cutmix.p);
            let targets = match &hard {
                Some(_) if !mix => None,
                Some(labels) => Some(one_hot(labels, k, DType::F32)?),
                None => Some(Tensor::from_vec(probs.concat().into_iter().map(|v| v as f32).collect(), (idx.len(), k), x.device())?),
            };
            let (x, targets) = match targets {
                Some(t) if mix => {
                    let (x, t) = augment::mix_batch(&x, &t, Augmentation::Cutmix, cfg.cutmix.beta, &mut rng)?;
                    (x, Some(t))
                }
                t => (x, t),
            };
            let mut logits = net.forward(&x, &mut Pass::train())?;
            if let Some(a) = allowed {
                logits = mask_logits(&logits, a)?;
            }
            let loss = match (&targets, &hard) {
                (Some(t), _) => soft_cross_entropy(&logits, t)?,
                (None, Some(labels)) => cross_entropy(&logits, labels)?,
                (None, None) => unreachable!("soft mode always builds targets"),
            };
            let value = loss.to_scalar::<f32>()? as f64;
            ensure_finite(value, "evaluate", step, || last.clone())?;
            last = format!("step {step}, loss {value:.6}");
            opt.step(&loss.backward()?, cosine_lr(cfg.optimizer.lr, step, total))?;
            step_losses.push(value);
            sum += value;
            step += 1;
        }
        let val_top1 = match val {
            Some(v) if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs => Some(top1(&net, v, allowed)?),
            _ => None,
        };
        let train_loss = sum / steps_per_epoch as f64;
        log::info!("student epoch {epoch}: loss {train_loss:.4}, val top-1 {val_top1:?}");
        history.push(EpochStat {
            epoch,
            train_loss,
            val_top1,
        });
    }
    let final_top1 = history.last().and_then(|h| h.val_top1);
    let mut augmentations_used = vec![Augmentation::RandomResizedCrop];
    if cfg.cutmix.enabled {
        augmentations_used.push(Augmentation::Cutmix);
    }
    let checkpoint = net.to_checkpoint(CheckpointMeta {
        epochs_trained: cfg.epochs,
        augmentations_used,
        val_top1: final_top1,
        seed: cfg.seed,
        normalization: Some(cd.normalization),
    })?;
    Ok(StudentReport {
        checkpoint,
        history,
        step_losses,
        final_top1,
    })
}

fn check_pairing(cd: &CondensedDataset, archive: &CropLabelArchive, cfg: &EvalConfig) -> Result<()> {
    cd.validate()?;
    let m = &archive.meta;
    if m.num_images != cd.len() || m.resolution != cd.resolution || m.num_classes != cd.num_classes {
        return Err(Error::Structural(format!(
            "label archive ({} images, {} px, {} classes) does not match condensed set ({} images, {} px, {} classes)",
            m.num_images, m.resolution, m.num_classes, cd.len(), cd.resolution, cd.num_classes
        )));
    }
    if m.images_sha256 != cd.checksum() {
        return Err(Error::Integrity("label archive was generated for different condensed images".into()));
    }
    if cfg.epochs > m.epochs {
        return Err(Error::config(format!(
            "student budget of {} epochs exceeds the {} epochs stored in the label archive",
            cfg.epochs, m.epochs
        )));
    }
    if cfg.student.input_resolution != cd.resolution || cfg.student.num_classes != cd.num_classes {
        return Err(Error::config(format!(
            "student expects {} px / {} classes, condensed set is {} px / {} classes",
            cfg.student.input_resolution, cfg.student.num_classes, cd.resolution, cd.num_classes
        )));
    }
    Ok(())
}

fn restrict(mut p: Vec<f64>, allowed: Option<&[usize]>) -> Vec<f64> {
    let Some(allowed) = allowed else { return p };
    let mut keep = vec![false; p.len()];
    allowed.iter().for_each(|&c| keep[c] = true);
    p.iter_mut().zip(&keep).filter(|(_, &k)| !k).for_each(|(v, _)| *v = 0.0);
    let s: f64 = p.iter().sum();
    if s > 0.0 {
        p.iter_mut().for_each(|v| *v /= s);
    } else {
        allowed.iter().for_each(|&c| p[c] = 1.0 / allowed.len() as f64);
    }
    p
}

fn argmax(p: &[f64]) -> usize {
    (0..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best })
}

/// Top-1 of a trained student on `val`.
pub fn top1_accuracy(student: &Checkpoint, val: &LabeledDataset) -> Result<f64> {
    crate::squeeze::evaluate_checkpoint(student, val)
}

/// A copy of `cd` whose pixels are i.i.d. standard Gaussian noise; labels and
/// layout are unchanged. Used as a control with an identical label budget.
pub fn gaussian_noise_like(cd: &CondensedDataset, seed: u64) -> CondensedDataset {
    let mut rng = seed::stream(seed, &[streams::SYNTH_INIT, u64::MAX]);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    CondensedDataset {
        images: (0..cd.images.len()).map(|_| normal.sample(&mut rng)).collect(),
        ..cd.clone()
    }
}

/// Write `epoch,train_loss,val_top1` rows; missing accuracies are empty.
pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochStat]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
    writeln!(f, "epoch,train_loss,val_top1").at(path)?;
    for h in history {
        let acc = h.val_top1.map(|v| v.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{acc}", h.epoch, h.train_loss).at(path)?;
    }
    f.flush().at(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn kd_loss_of_a_single_row() {
        let z = Tensor::new(&[1.0f64, 0.0], &Device::Cpu).unwrap();
        let t = Tensor::new(&[0.5f64, 0.5], &Device::Cpu).unwrap();
        let got = kd_loss(&z, &t).unwrap().to_scalar::<f64>().unwrap();
        let lse = (1f64.exp() + 1.0).ln();
        let want = -(0.5 * (1.0 - lse) + 0.5 * (0.0 - lse));
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn restriction_renormalizes() {
        let p = restrict(vec![0.5, 0.25, 0.25], Some(&[1, 2]));
        assert_eq!(p, vec![0.0, 0.5, 0.5]);
        assert_eq!(restrict(vec![1.0, 0.0], Some(&[1])), vec![0.0, 1.0]);
    }
}
