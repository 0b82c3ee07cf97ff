#![allow(dead_code)]

use std::sync::OnceLock;

use condense::data::{toy_dataset, LabeledDataset, Split, ToySpec};
use condense::model_zoo::{ArchId, BackboneSpec, Checkpoint};
use condense::squeeze::{squeeze_train, SqueezeConfig};

pub const CLASSES: usize = 4;

pub fn toy_train() -> LabeledDataset {
    toy_dataset(&ToySpec::new(CLASSES, 16, 32), Split::Train, 0).unwrap()
}

pub fn toy_val() -> LabeledDataset {
    toy_dataset(&ToySpec::new(CLASSES, 8, 32), Split::Val, 0).unwrap()
}

pub fn small_spec() -> BackboneSpec {
    BackboneSpec::new(ArchId::Convnet4, 32, CLASSES).with_width(8).with_depth(3)
}

/// A briefly trained 32 px teacher, built once per test binary.
pub fn teacher() -> &'static Checkpoint {
    static CKPT: OnceLock<Checkpoint> = OnceLock::new();
    CKPT.get_or_init(|| {
        let mut cfg = SqueezeConfig::for_resolution(32);
        cfg.epochs = 3;
        cfg.batch_size = 32;
        squeeze_train(&toy_train(), &toy_val(), &small_spec(), &cfg).unwrap()
    })
}

/// The first `ipc` real toy images of every class, packaged as a condensed
/// set. Cheap stand-in for a recovered set.
pub fn toy_condensed(ipc: usize) -> condense::data::CondensedDataset {
    let train = toy_train();
    let n = train.image_len();
    let mut images = Vec::new();
    let mut hard_labels = Vec::new();
    for c in 0..CLASSES {
        let idx: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == c).take(ipc).collect();
        for i in idx {
            images.extend_from_slice(&train.images[i * n..(i + 1) * n]);
            hard_labels.push(c);
        }
    }
    let cd = condense::data::CondensedDataset {
        ipc,
        class_ids: (0..CLASSES).collect(),
        num_classes: CLASSES,
        resolution: 32,
        normalization: train.normalization,
        images,
        hard_labels,
        provenance: Default::default(),
    };
    cd.validate().unwrap();
    cd
}
