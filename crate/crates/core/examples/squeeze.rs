//! Stage 1: train a teacher on the procedural toy dataset and keep its BN statistics.

use condense::data::{toy_dataset, Split, ToySpec};
use condense::model_zoo::{save_checkpoint, ArchId, BackboneSpec};
use condense::squeeze::{squeeze_train, SqueezeConfig};

fn main() -> condense::Result<()> {
    let train = toy_dataset(&ToySpec::new(10, 100, 32), Split::Train, 0)?;
    let val = toy_dataset(&ToySpec::new(10, 50, 32), Split::Val, 0)?;
    let spec = BackboneSpec::new(ArchId::Convnet4, 32, 10).with_width(16).with_depth(3);
    let mut cfg = SqueezeConfig::for_resolution(32);
    cfg.epochs = 10;

    let ckpt = squeeze_train(&train, &val, &spec, &cfg)?;
    println!("val top-1 after {} epochs: {:.3}", ckpt.meta.epochs_trained, ckpt.meta.val_top1.unwrap_or(f64::NAN));
    for s in &ckpt.bn_stats {
        let mean = s.running_mean.iter().sum::<f64>() / s.running_mean.len() as f64;
        let var = s.running_var.iter().sum::<f64>() / s.running_var.len() as f64;
        println!("  BN {}: {} channels, mean of means {mean:+.3}, mean of vars {var:.3}", s.layer_index, s.running_mean.len());
    }
    let path = std::env::temp_dir().join("condense-teacher.ckpt");
    save_checkpoint(&ckpt, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
