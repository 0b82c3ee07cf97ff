//! Backbone construction, BN introspection and checkpoints.
//!
//! BN layers are enumerated in depth-first construction order:
//!
//! * `convnet4`: one BN per block, input to output.
//! * ResNets: stem BN, then per block `bn1, bn2[, bn3]` followed by the
//!   downsample BN when the block has one.
//! * `bnvit_tiny`: per block the pre-attention BN, the pre-FFN BN and the BN
//!   between the two FFN linears, then the final BN.

mod checkpoint;
mod network;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Precision, CHECKPOINT_VERSION};
pub use network::Network;

use crate::error::{Error, Result};
use crate::nn::{NormKind, VitDescription};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    Convnet4,
    Resnet18Adapted,
    Resnet50Adapted,
    BnvitTiny,
}

impl ArchId {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::Convnet4 => "convnet4",
            ArchId::Resnet18Adapted => "resnet18_adapted",
            ArchId::Resnet50Adapted => "resnet50_adapted",
            ArchId::BnvitTiny => "bnvit_tiny",
        }
    }

    fn default_width(self) -> usize {
        match self {
            ArchId::Convnet4 => 128,
            ArchId::Resnet18Adapted | ArchId::Resnet50Adapted => 64,
            ArchId::BnvitTiny => 192,
        }
    }

    fn default_depth(self) -> Option<usize> {
        match self {
            ArchId::Convnet4 => Some(4),
            ArchId::BnvitTiny => Some(12),
            _ => None,
        }
    }
}

impl std::str::FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "convnet4" => ArchId::Convnet4,
            "resnet18_adapted" | "resnet18" => ArchId::Resnet18Adapted,
            "resnet50_adapted" | "resnet50" => ArchId::Resnet50Adapted,
            "bnvit_tiny" => ArchId::BnvitTiny,
            other => return Err(Error::config(format!("unknown architecture `{other}`"))),
        })
    }
}

impl std::fmt::Display for ArchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const SUPPORTED_RESOLUTIONS: [usize; 3] = [32, 64, 224];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub arch: ArchId,
    pub input_resolution: usize,
    pub num_classes: usize,
    /// 3×3 stride-1 stem without the initial max-pool (ResNets only).
    #[serde(default)]
    pub small_input_mode: bool,
    /// Base channel count (ConvNet/ResNet) or embedding width (ViT).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    /// Block count for `convnet4` and `bnvit_tiny`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
}

impl BackboneSpec {
    pub fn new(arch: ArchId, input_resolution: usize, num_classes: usize) -> Self {
        Self {
            arch,
            input_resolution,
            num_classes,
            small_input_mode: matches!(arch, ArchId::Resnet18Adapted | ArchId::Resnet50Adapted) && input_resolution <= 64,
            width: None,
            depth: None,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = Some(width);
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = Some(depth);
        self
    }

    pub fn width(&self) -> usize {
        self.width.unwrap_or(self.arch.default_width())
    }

    pub fn depth(&self) -> Option<usize> {
        self.depth.or(self.arch.default_depth())
    }

    /// Patch size used by the ViT: 16 at 224 px, 4 at small resolutions.
    pub fn patch_size(&self) -> usize {
        if self.input_resolution >= 224 {
            16
        } else {
            4
        }
    }

    /// Checks that don't depend on the published resolution set; used for
    /// every network, including toy ones.
    pub(crate) fn validate_structure(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.width() == 0 || self.depth() == Some(0) {
            return Err(Error::config("width and depth must be positive"));
        }
        match self.arch {
            ArchId::Resnet18Adapted | ArchId::Resnet50Adapted => {
                if self.depth.is_some() {
                    return Err(Error::config("ResNet depth is fixed by the architecture"));
                }
            }
            ArchId::BnvitTiny => self.vit_description().validate()?,
            ArchId::Convnet4 => {
                if self.small_input_mode {
                    return Err(Error::config("small_input_mode only applies to ResNet stems"));
                }
            }
        }
        if self.input_resolution == 0 {
            return Err(Error::config("input resolution must be positive"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_RESOLUTIONS.contains(&self.input_resolution) {
            return Err(Error::config(format!(
                "input resolution {} not in {:?}",
                self.input_resolution, SUPPORTED_RESOLUTIONS
            )));
        }
        if self.small_input_mode && self.input_resolution > 64 {
            return Err(Error::config(format!(
                "{} with the small-input stem requires resolution ≤ 64, got {}",
                self.arch, self.input_resolution
            )));
        }
        self.validate_structure()
    }

    /// The BN-ViT description this spec builds (meaningful for `bnvit_tiny`).
    pub fn vit_description(&self) -> VitDescription {
        let d = self.width();
        let heads = (d / 64).max(1);
        let mut desc = VitDescription::layer_norm(
            self.input_resolution,
            self.patch_size(),
            d,
            self.depth().unwrap_or(12),
            heads,
            self.num_classes,
        );
        for b in &mut desc.blocks {
            b.attn_norm = NormKind::BatchNorm;
            b.ffn_norm = NormKind::BatchNorm;
            b.ffn_inner_bn = true;
        }
        desc.final_norm = NormKind::BatchNorm;
        desc
    }
}

/// Build a freshly initialised, trainable backbone.
pub fn build_backbone(spec: &BackboneSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    Network::new(spec, seed, candle_core::DType::F32, crate::nn::ParamMode::Trainable)
}

/// Rewrite a ViT description so every normalisation site is BN and a BN sits
/// between the two FFN linears of each block.
pub fn convert_ln_to_bn_description(desc: &VitDescription) -> Result<VitDescription> {
    let mut out = desc.clone();
    for (i, b) in out.blocks.iter_mut().enumerate() {
        if b.ffn_dims.len() != 2 {
            return Err(Error::config(format!(
                "block {i}: expected a two-linear FFN, found {} linear layer(s)",
                b.ffn_dims.len()
            )));
        }
        b.attn_norm = NormKind::BatchNorm;
        b.ffn_norm = NormKind::BatchNorm;
        b.ffn_inner_bn = true;
    }
    out.final_norm = NormKind::BatchNorm;
    out.validate()?;
    Ok(out)
}

/// Build the BN-ViT counterpart of a LayerNorm ViT description.
pub fn convert_ln_to_bn(desc: &VitDescription, seed: u64) -> Result<Network> {
    let converted = convert_ln_to_bn_description(desc)?;
    Network::from_vit_description(&converted, seed, candle_core::DType::F32, crate::nn::ParamMode::Trainable)
}

/// Copy the running statistics out of a checkpoint, in canonical order.
pub fn extract_bn_stats(checkpoint: &Checkpoint) -> Result<Vec<crate::nn::BnLayerStats>> {
    if checkpoint.bn_stats.is_empty() {
        return Err(Error::Structural(
            "checkpoint has no BN layers and cannot drive recovery".into(),
        ));
    }
    Ok(checkpoint.bn_stats.clone())
}
