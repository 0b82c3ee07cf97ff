//! Stage 3: store per-crop soft labels once, at several label precisions.

use condense::data::{toy_dataset, CondensedDataset, Split, ToySpec};
use condense::model_zoo::{ArchId, BackboneSpec};
use condense::recover::{recover, RecoverConfig};
use condense::relabel::{load_archive, relabel, save_archive, LabelPrecision, RelabelConfig};
use condense::squeeze::{squeeze_train, SqueezeConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let train = toy_dataset(&ToySpec::new(4, 50, 32), Split::Train, 0)?;
    let val = toy_dataset(&ToySpec::new(4, 20, 32), Split::Val, 0)?;
    let spec = BackboneSpec::new(ArchId::Convnet4, 32, 4).with_width(16).with_depth(3);
    let mut sq = SqueezeConfig::for_resolution(32);
    sq.epochs = 5;
    let teacher = squeeze_train(&train, &val, &spec, &sq)?;
    let mut rc = RecoverConfig::for_resolution(32, 2);
    rc.iterations = 50;
    let cd: CondensedDataset = recover(&teacher, &rc, &[0, 1, 2, 3])?;

    let dir = std::env::temp_dir().join("condense-relabel");
    std::fs::create_dir_all(&dir)?;
    for name in ["f32", "f16", "top2"] {
        let precision: LabelPrecision = name.parse()?;
        let cfg = RelabelConfig {
            precision,
            ..RelabelConfig::for_resolution(32, 20)
        };
        let archive = relabel(&cd, &teacher, &cfg)?;
        let path = dir.join(format!("labels-{name}.srl"));
        let bytes = save_archive(&archive, &path)?;
        let back = load_archive(&path)?;
        let r = &back.records[0][0];
        println!("{name:<5} {bytes:>6} bytes  image 0 epoch 0: crop {:?} flip {} p {:.3?}", r.rect, r.hflip, r.soft_label.probs());
    }

    // Temperature flattens the labels without moving the argmax.
    for tau in [1.0, 4.0, 20.0] {
        let cfg = RelabelConfig {
            temperature: tau,
            ..RelabelConfig::for_resolution(32, 1)
        };
        let p = relabel(&cd, &teacher, &cfg)?.records[0][0].soft_label.probs();
        println!("tau {tau:>4}: {p:.3?}");
    }
    Ok(())
}
