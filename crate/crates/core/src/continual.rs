//! Class-incremental evaluation on a condensed set.
//!
//! Classes arrive in a seeded order, `classes_per_step` at a time. At each
//! step a fresh student is trained on the stored images of every class seen
//! so far (optionally capped per class), logits of unseen classes are masked,
//! and top-1 is measured on validation samples of the seen classes.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{CondensedDataset, LabeledDataset};
use crate::error::{Error, IoContext, Result};
use crate::evaluate::{train_student_on, EvalConfig};
use crate::relabel::CropLabelArchive;
use crate::seed::{self, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualConfig {
    pub steps: usize,
    /// Must equal `classes / steps` when given.
    #[serde(default)]
    pub classes_per_step: Option<usize>,
    /// Stored images used per class; all of them when absent.
    #[serde(default)]
    pub memory_per_class: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub step: usize,
    pub new_classes: Vec<usize>,
    pub classes_seen: usize,
    pub train_images: usize,
    pub top1: f64,
}

/// Seeded arrival order of `class_ids`.
pub fn class_order(class_ids: &[usize], seed: u64) -> Vec<usize> {
    let mut order = class_ids.to_vec();
    order.shuffle(&mut seed::stream(seed, &[streams::CLASS_ORDER]));
    order
}

pub fn class_incremental_run(
    cd: &CondensedDataset,
    archive: &CropLabelArchive,
    eval: &EvalConfig,
    val: &LabeledDataset,
    cfg: &ContinualConfig,
) -> Result<Vec<StepResult>> {
    let total = cd.class_ids.len();
    if cfg.steps == 0 || total % cfg.steps != 0 {
        return Err(Error::config(format!("{} classes cannot be split into {} equal steps", total, cfg.steps)));
    }
    let per_step = total / cfg.steps;
    if let Some(c) = cfg.classes_per_step {
        if c * cfg.steps != total {
            return Err(Error::config(format!(
                "{} steps × {c} classes per step ≠ {total} classes",
                cfg.steps
            )));
        }
    }
    let memory = cfg.memory_per_class.unwrap_or(cd.ipc);
    if memory == 0 {
        return Err(Error::config("memory_per_class must be ≥ 1"));
    }
    let order = class_order(&cd.class_ids, cfg.seed);
    let mut results = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seen = &order[..(step + 1) * per_step];
        let mut indices = cd.indices_for_classes(seen, memory)?;
        // Storage order keeps the final step identical to a single-step run.
        indices.sort_unstable();
        let allowed = (seen.len() < total).then_some(seen);
        let val_seen = val.filter_classes(seen);
        let report = train_student_on(cd, archive, eval, &indices, allowed, Some(&val_seen))?;
        let top1 = report.final_top1.expect("validation runs on the last epoch");
        log::info!("continual step {step}: {} classes, top-1 {top1:.4}", seen.len());
        results.push(StepResult {
            step,
            new_classes: order[step * per_step..(step + 1) * per_step].to_vec(),
            classes_seen: seen.len(),
            train_images: indices.len(),
            top1,
        });
    }
    Ok(results)
}

/// Write `step,classes_seen,train_images,top1` rows.
pub fn write_continual_csv(path: impl AsRef<Path>, results: &[StepResult]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
    writeln!(f, "step,classes_seen,train_images,top1").at(path)?;
    for r in results {
        writeln!(f, "{},{},{},{}", r.step, r.classes_seen, r.train_images, r.top1).at(path)?;
    }
    f.flush().at(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_a_seeded_permutation() {
        let ids: Vec<usize> = (0..10).collect();
        let mut a = class_order(&ids, 4);
        assert_eq!(a, class_order(&ids, 4));
        a.sort();
        assert_eq!(a, ids);
    }
}
