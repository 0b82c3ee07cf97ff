//! Build each backbone family, count its BN layers and round-trip a checkpoint.

use candle_core::{Device, Tensor};
use condense::model_zoo::{build_backbone, extract_bn_stats, load_checkpoint, save_checkpoint, ArchId, BackboneSpec, CheckpointMeta};
use condense::nn::Pass;

fn main() -> condense::Result<()> {
    let specs = [
        BackboneSpec::new(ArchId::Convnet4, 32, 10),
        BackboneSpec::new(ArchId::Resnet18Adapted, 32, 100),
        BackboneSpec::new(ArchId::Convnet4, 64, 200),
    ];
    for spec in &specs {
        let net = build_backbone(spec, 0)?;
        let probe = Tensor::zeros((2, 3, spec.input_resolution, spec.input_resolution), candle_core::DType::F32, &Device::Cpu)?;
        let logits = net.forward(&probe, &mut Pass::eval())?;
        println!("{:<18} {:>3} px  {:>2} BN layers  logits {:?}", spec.arch.as_str(), spec.input_resolution, net.bn_layers().len(), logits.dims());
    }

    let net = build_backbone(&specs[0], 7)?;
    let ckpt = net.to_checkpoint(CheckpointMeta::default())?;
    let path = std::env::temp_dir().join("condense-model-zoo.ckpt");
    save_checkpoint(&ckpt, &path)?;
    let back = load_checkpoint(&path)?;
    let first = &extract_bn_stats(&back)?[0];
    println!("reloaded {} (id {}), first BN layer has {} channels", path.display(), &back.id()?[..12], first.running_mean.len());
    Ok(())
}
