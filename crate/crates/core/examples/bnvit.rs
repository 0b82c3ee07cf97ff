//! Turn a LayerNorm ViT into its BN-ViT counterpart so it can drive recovery.

use candle_core::{DType, Device, Tensor};
use condense::model_zoo::{convert_ln_to_bn, Network};
use condense::nn::{ParamMode, Pass, VitDescription};

fn main() -> condense::Result<()> {
    let ln = VitDescription::layer_norm(32, 4, 64, 2, 2, 10);
    let original = Network::from_vit_description(&ln, 0, DType::F32, ParamMode::Frozen)?;
    let bnvit = convert_ln_to_bn(&ln, 0)?;
    println!("LayerNorm ViT: {} BN layers", original.bn_layers().len());
    println!("BN-ViT:        {} BN layers", bnvit.bn_layers().len());
    for bn in bnvit.bn_layers() {
        println!("  #{:<2} {}", bn.index(), bn.name());
    }
    let x = Tensor::randn(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu)?;
    let before = original.forward_tokens(&x, &mut Pass::eval())?;
    let after = bnvit.forward_tokens(&x, &mut Pass::eval())?;
    println!("token output {:?} -> {:?}", before.dims(), after.dims());
    Ok(())
}
