//! Stage 2: synthesise class-conditional images from a frozen teacher by
//! matching its BN running statistics.

use condense::data::{save_condensed, toy_dataset, write_previews, Split, ToySpec};
use condense::model_zoo::{ArchId, BackboneSpec};
use condense::recover::{recover_report, write_loss_csv, RecoverConfig};
use condense::squeeze::{squeeze_train, SqueezeConfig};

fn main() -> condense::Result<()> {
    let train = toy_dataset(&ToySpec::new(4, 50, 32), Split::Train, 0)?;
    let val = toy_dataset(&ToySpec::new(4, 20, 32), Split::Val, 0)?;
    let spec = BackboneSpec::new(ArchId::Convnet4, 32, 4).with_width(16).with_depth(3);
    let mut sq = SqueezeConfig::for_resolution(32);
    sq.epochs = 8;
    let teacher = squeeze_train(&train, &val, &spec, &sq)?;

    let mut cfg = RecoverConfig::for_resolution(32, 2);
    cfg.iterations = 200;
    cfg.alpha_tv = 1e-4;
    let report = recover_report(&teacher, &cfg, &[0, 1, 2, 3], None)?;
    for (i, l) in report.losses.iter().enumerate().step_by(50) {
        println!("iter {i:>4}  ce {:.4}  r_bn {:.3}  r_tv {:.1}  total {:.4}", l.ce, l.r_bn, l.r_tv, l.total);
    }
    println!("{} images, {:.1} ms per image", report.condensed.len(), report.ms_per_image);

    let out = std::env::temp_dir().join("condense-recovered");
    save_condensed(&report.condensed, &out)?;
    write_loss_csv(out.join("losses.csv"), &report.losses)?;
    write_previews(&report.condensed, out.join("previews"))?;
    println!("wrote {}", out.display());
    Ok(())
}
