use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::model_zoo::{ArchId, BackboneSpec, Checkpoint, CheckpointMeta, Precision};
use crate::nn::{BatchNorm, BnLayerStats, ConvNet, NamedArray, Param, ParamInit, ParamMode, Pass, ResNet, ResNetLayout, Vit, VitDescription};
use crate::seed;

pub const IN_CHANNELS: usize = 3;

enum Body {
    ConvNet(ConvNet),
    ResNet(ResNet),
    Vit(Vit),
}

/// A constructed backbone: weights, BN layers and a classifier head.
///
/// The network is `Sync`; evaluation-mode forwards never mutate it, so one
/// frozen instance can serve many concurrent readers.
pub struct Network {
    spec: BackboneSpec,
    vit: Option<VitDescription>,
    body: Body,
    params: Vec<Param>,
    dtype: DType,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("spec", &self.spec)
            .field("params", &self.params.len())
            .field("bn_layers", &self.bn_layers().len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

fn build_body(p: &mut ParamInit, spec: &BackboneSpec, vit: Option<&VitDescription>) -> Result<Body> {
    Ok(match spec.arch {
        ArchId::Convnet4 => Body::ConvNet(ConvNet::new(
            p,
            IN_CHANNELS,
            spec.input_resolution,
            spec.width(),
            spec.depth().unwrap_or(4),
            spec.num_classes,
        )?),
        ArchId::Resnet18Adapted => Body::ResNet(ResNet::new(
            p,
            ResNetLayout::RESNET18,
            IN_CHANNELS,
            spec.width(),
            spec.small_input_mode,
            spec.num_classes,
        )?),
        ArchId::Resnet50Adapted => Body::ResNet(ResNet::new(
            p,
            ResNetLayout::RESNET50,
            IN_CHANNELS,
            spec.width(),
            spec.small_input_mode,
            spec.num_classes,
        )?),
        ArchId::BnvitTiny => {
            let desc = match vit {
                Some(d) => d.clone(),
                None => spec.vit_description(),
            };
            Body::Vit(Vit::new(p, &desc)?)
        }
    })
}

impl Network {
    /// Build without enforcing the published resolution set, so small toy
    /// networks (e.g. 8×8 inputs) can be constructed for testing.
    pub fn new(spec: &BackboneSpec, seed: u64, dtype: DType, mode: ParamMode) -> Result<Self> {
        spec.validate_structure()?;
        let mut p = ParamInit::random(seed::stream(seed, &[seed::streams::INIT]), dtype, mode);
        let body = build_body(&mut p, spec, None)?;
        Self::assemble(spec.clone(), None, body, p, dtype)
    }

    pub fn from_vit_description(desc: &VitDescription, seed: u64, dtype: DType, mode: ParamMode) -> Result<Self> {
        desc.validate()?;
        let spec = BackboneSpec {
            arch: ArchId::BnvitTiny,
            input_resolution: desc.image_size,
            num_classes: desc.num_classes,
            small_input_mode: false,
            width: Some(desc.embed_dim),
            depth: Some(desc.blocks.len()),
        };
        let mut p = ParamInit::random(seed::stream(seed, &[seed::streams::INIT]), dtype, mode);
        let body = build_body(&mut p, &spec, Some(desc))?;
        Self::assemble(spec, Some(desc.clone()), body, p, dtype)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, mode: ParamMode) -> Result<Self> {
        Self::from_checkpoint_as(ckpt, ckpt.precision.dtype(), mode)
    }

    pub fn from_checkpoint_as(ckpt: &Checkpoint, dtype: DType, mode: ParamMode) -> Result<Self> {
        ckpt.spec.validate_structure()?;
        let mut p = ParamInit::loaded(&ckpt.parameters, &ckpt.bn_stats, dtype, mode);
        let body = build_body(&mut p, &ckpt.spec, ckpt.vit.as_ref())?;
        let net = Self::assemble(ckpt.spec.clone(), ckpt.vit.clone(), body, p, dtype)?;
        if net.params.len() != ckpt.parameters.len() {
            return Err(Error::Structural(format!(
                "checkpoint has {} weights, network uses {}",
                ckpt.parameters.len(),
                net.params.len()
            )));
        }
        if net.bn_layers().len() != ckpt.bn_stats.len() {
            return Err(Error::Structural(format!(
                "checkpoint has {} BN layers, network has {}",
                ckpt.bn_stats.len(),
                net.bn_layers().len()
            )));
        }
        Ok(net)
    }

    fn assemble(spec: BackboneSpec, vit: Option<VitDescription>, body: Body, p: ParamInit, dtype: DType) -> Result<Self> {
        let net = Self {
            spec,
            vit,
            body,
            params: p.finish(),
            dtype,
        };
        debug_assert!(net.bn_layers().iter().enumerate().all(|(i, b)| b.index() == i));
        Ok(net)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn vit_description(&self) -> Option<&VitDescription> {
        self.vit.as_ref()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn input_resolution(&self) -> usize {
        self.spec.input_resolution
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Trainable variables, empty for frozen networks.
    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().filter_map(|p| p.var.clone()).collect()
    }

    pub fn feature_dim(&self) -> usize {
        match &self.body {
            Body::ConvNet(n) => n.feature_dim(),
            Body::ResNet(n) => n.feature_dim(),
            Body::Vit(n) => n.feature_dim(),
        }
    }

    /// Penultimate features `[B, D]`.
    pub fn features(&self, x: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        let x = x.to_dtype(self.dtype)?;
        match &self.body {
            Body::ConvNet(n) => n.features(&x, pass),
            Body::ResNet(n) => n.features(&x, pass),
            Body::Vit(n) => n.features(&x, pass),
        }
    }

    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        match &self.body {
            Body::ConvNet(n) => n.head(features),
            Body::ResNet(n) => n.head(features),
            Body::Vit(n) => n.head(features),
        }
    }

    /// Logits `[B, num_classes]`.
    pub fn forward(&self, x: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        let f = self.features(x, pass)?;
        self.head(&f)
    }

    /// Transformer token outputs, for ViT bodies only.
    pub fn forward_tokens(&self, x: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        match &self.body {
            Body::Vit(v) => v.forward_tokens(&x.to_dtype(self.dtype)?, pass),
            _ => Err(Error::config("token outputs exist only for transformer backbones")),
        }
    }

    /// BN layers in canonical order.
    pub fn bn_layers(&self) -> Vec<&BatchNorm> {
        match &self.body {
            Body::ConvNet(n) => n.bn_layers(),
            Body::ResNet(n) => n.bn_layers(),
            Body::Vit(n) => n.bn_layers(),
        }
    }

    pub fn bn_stats(&self) -> Result<Vec<BnLayerStats>> {
        self.bn_layers().iter().map(|b| b.stats()).collect()
    }

    /// Overwrite running statistics, e.g. to build a fixed-point fixture.
    pub fn set_bn_stats(&self, stats: &[BnLayerStats]) -> Result<()> {
        let layers = self.bn_layers();
        if layers.len() != stats.len() {
            return Err(Error::Structural(format!(
                "network has {} BN layers, got stats for {}",
                layers.len(),
                stats.len()
            )));
        }
        for (layer, s) in layers.iter().zip(stats) {
            layer.set_running(s)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Result<Checkpoint> {
        let parameters = self
            .params
            .iter()
            .map(|p| {
                Ok(NamedArray {
                    name: p.name.clone(),
                    shape: p.tensor.dims().to_vec(),
                    data: p.tensor.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            spec: self.spec.clone(),
            vit: self.vit.clone(),
            precision: Precision::from_dtype(self.dtype)?,
            parameters,
            bn_stats: self.bn_stats()?,
            meta,
        })
    }
}
