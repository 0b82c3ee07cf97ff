//! Class-incremental learning from a condensed memory: each step retrains
//! from scratch on every class seen so far.

use condense::continual::{class_incremental_run, write_continual_csv, ContinualConfig};
use condense::data::{toy_dataset, Split, ToySpec};
use condense::evaluate::EvalConfig;
use condense::model_zoo::{ArchId, BackboneSpec};
use condense::recover::{recover, RecoverConfig};
use condense::relabel::{relabel, RelabelConfig};
use condense::squeeze::{squeeze_train, SqueezeConfig};

fn main() -> condense::Result<()> {
    let train = toy_dataset(&ToySpec::new(10, 60, 32), Split::Train, 0)?;
    let val = toy_dataset(&ToySpec::new(10, 30, 32), Split::Val, 0)?;
    let spec = BackboneSpec::new(ArchId::Convnet4, 32, 10).with_width(16).with_depth(3);
    let mut sq = SqueezeConfig::for_resolution(32);
    sq.epochs = 10;
    let teacher = squeeze_train(&train, &val, &spec, &sq)?;
    let mut rc = RecoverConfig::for_resolution(32, 4);
    rc.iterations = 100;
    let cd = recover(&teacher, &rc, &(0..10).collect::<Vec<_>>())?;
    let archive = relabel(&cd, &teacher, &RelabelConfig::for_resolution(32, 30))?;

    let mut eval = EvalConfig::for_resolution(spec);
    eval.epochs = 30;
    eval.eval_every = 30;
    let cfg = ContinualConfig {
        steps: 5,
        classes_per_step: Some(2),
        memory_per_class: Some(3),
        seed: 1,
    };
    let steps = class_incremental_run(&cd, &archive, &eval, &val, &cfg)?;
    for s in &steps {
        println!("step {}: +{:?} -> {:>2} classes, {:>2} images, top-1 {:.3}", s.step, s.new_classes, s.classes_seen, s.train_images, s.top1);
    }
    write_continual_csv(std::env::temp_dir().join("condense-continual.csv"), &steps)?;
    Ok(())
}
