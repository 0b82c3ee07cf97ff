//! Train a student on a condensed set with its stored soft labels, next to a
//! control that keeps the labels but replaces every image with noise.

use condense::data::{toy_dataset, Split, ToySpec};
use condense::evaluate::{gaussian_noise_like, train_student, write_history_csv, EvalConfig, TargetMode};
use condense::model_zoo::{ArchId, BackboneSpec};
use condense::recover::{recover, RecoverConfig};
use condense::relabel::{relabel, RelabelConfig};
use condense::squeeze::{squeeze_train, SqueezeConfig};

fn main() -> condense::Result<()> {
    let train = toy_dataset(&ToySpec::new(10, 100, 32), Split::Train, 0)?;
    let val = toy_dataset(&ToySpec::new(10, 50, 32), Split::Val, 0)?;
    let spec = BackboneSpec::new(ArchId::Convnet4, 32, 10).with_width(16).with_depth(3);
    let mut sq = SqueezeConfig::for_resolution(32);
    sq.epochs = 10;
    let teacher = squeeze_train(&train, &val, &spec, &sq)?;
    let mut rc = RecoverConfig::for_resolution(32, 5);
    rc.iterations = 200;
    let cd = recover(&teacher, &rc, &(0..10).collect::<Vec<_>>())?;
    let archive = relabel(&cd, &teacher, &RelabelConfig::for_resolution(32, 60))?;

    let mut cfg = EvalConfig::for_resolution(spec);
    cfg.epochs = 60;
    cfg.eval_every = 10;
    let soft = train_student(&cd, &archive, &cfg, Some(&val))?;
    write_history_csv(std::env::temp_dir().join("condense-student-history.csv"), &soft.history)?;

    let mut hard_cfg = cfg.clone();
    hard_cfg.targets = TargetMode::HardLabels;
    let hard = train_student(&cd, &archive, &hard_cfg, Some(&val))?;

    let noise = gaussian_noise_like(&cd, 1);
    let mut noise_labels = archive.clone();
    noise_labels.meta.images_sha256 = noise.checksum();
    let control = train_student(&noise, &noise_labels, &cfg, Some(&val))?;

    let pct = |r: &condense::evaluate::StudentReport| 100.0 * r.final_top1.unwrap_or(f64::NAN);
    println!("soft labels   {:5.1}%", pct(&soft));
    println!("hard labels   {:5.1}%", pct(&hard));
    println!("noise control {:5.1}%", pct(&control));
    Ok(())
}
