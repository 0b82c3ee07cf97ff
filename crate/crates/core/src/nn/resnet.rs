use candle_core::Tensor;

use crate::error::Result;
use crate::nn::layers::{global_avg_pool, BatchNorm, Conv2d, Linear, Pass};
use crate::nn::params::ParamInit;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// Stage layout of the ResNet family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResNetLayout {
    pub kind: BlockKind,
    pub stages: [usize; 4],
}

impl ResNetLayout {
    pub const RESNET18: Self = Self {
        kind: BlockKind::Basic,
        stages: [2, 2, 2, 2],
    };
    pub const RESNET50: Self = Self {
        kind: BlockKind::Bottleneck,
        stages: [3, 4, 6, 3],
    };
}

struct Downsample {
    conv: Conv2d,
    bn: BatchNorm,
}

struct Block {
    convs: Vec<Conv2d>,
    bns: Vec<BatchNorm>,
    down: Option<Downsample>,
}

impl Block {
    fn new(p: &mut ParamInit, kind: BlockKind, in_c: usize, planes: usize, stride: usize) -> Result<Self> {
        let out_c = planes * kind.expansion();
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        match kind {
            BlockKind::Basic => {
                convs.push(Conv2d::new(p, "conv1", in_c, planes, 3, stride, 1, false)?);
                bns.push(p.batch_norm("bn1", planes)?);
                convs.push(Conv2d::new(p, "conv2", planes, planes, 3, 1, 1, false)?);
                bns.push(p.batch_norm("bn2", planes)?);
            }
            BlockKind::Bottleneck => {
                convs.push(Conv2d::new(p, "conv1", in_c, planes, 1, 1, 0, false)?);
                bns.push(p.batch_norm("bn1", planes)?);
                convs.push(Conv2d::new(p, "conv2", planes, planes, 3, stride, 1, false)?);
                bns.push(p.batch_norm("bn2", planes)?);
                convs.push(Conv2d::new(p, "conv3", planes, out_c, 1, 1, 0, false)?);
                bns.push(p.batch_norm("bn3", out_c)?);
            }
        }
        let down = if stride != 1 || in_c != out_c {
            Some(p.scoped("downsample", |p| {
                Ok(Downsample {
                    conv: Conv2d::new(p, "conv", in_c, out_c, 1, stride, 0, false)?,
                    bn: p.batch_norm("bn", out_c)?,
                })
            })?)
        } else {
            None
        };
        Ok(Self { convs, bns, down })
    }

    fn forward(&self, x: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, (conv, bn)) in self.convs.iter().zip(&self.bns).enumerate() {
            h = bn.forward(&conv.forward(&h)?, pass)?;
            if i != last {
                h = h.relu()?;
            }
        }
        let identity = match &self.down {
            Some(d) => d.bn.forward(&d.conv.forward(x)?, pass)?,
            None => x.clone(),
        };
        Ok((h + identity)?.relu()?)
    }

    fn bn_layers(&self) -> impl Iterator<Item = &BatchNorm> {
        self.bns.iter().chain(self.down.as_ref().map(|d| &d.bn))
    }
}

/// ResNet with either the ImageNet stem (7×7/2 conv + 3×3/2 max-pool) or the
/// small-input stem (3×3/1 conv, no pooling).
pub struct ResNet {
    stem: Conv2d,
    stem_bn: BatchNorm,
    max_pool: bool,
    blocks: Vec<Block>,
    fc: Linear,
    feature_dim: usize,
}

impl ResNet {
    pub fn new(p: &mut ParamInit, layout: ResNetLayout, in_channels: usize, width: usize, small_input: bool, num_classes: usize) -> Result<Self> {
        let stem = if small_input {
            Conv2d::new(p, "conv1", in_channels, width, 3, 1, 1, false)?
        } else {
            Conv2d::new(p, "conv1", in_channels, width, 7, 2, 3, false)?
        };
        let stem_bn = p.batch_norm("bn1", width)?;
        let mut blocks = Vec::new();
        let mut in_c = width;
        for (s, &n) in layout.stages.iter().enumerate() {
            let planes = width << s;
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let block = p.scoped(format!("layer{}.{b}", s + 1), |p| Block::new(p, layout.kind, in_c, planes, stride))?;
                blocks.push(block);
                in_c = planes * layout.kind.expansion();
            }
        }
        let fc = Linear::new(p, "fc", in_c, num_classes)?;
        Ok(Self {
            stem,
            stem_bn,
            max_pool: !small_input,
            blocks,
            fc,
            feature_dim: in_c,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self, x: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        let mut h = self.stem_bn.forward(&self.stem.forward(x)?, pass)?.relu()?;
        if self.max_pool {
            // post-ReLU activations are ≥ 0, so zero padding acts like -inf padding
            h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?.max_pool2d_with_stride(3, 2)?;
        }
        for b in &self.blocks {
            h = b.forward(&h, pass)?;
        }
        global_avg_pool(&h)
    }

    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        self.fc.forward(features)
    }

    pub fn bn_layers(&self) -> Vec<&BatchNorm> {
        std::iter::once(&self.stem_bn)
            .chain(self.blocks.iter().flat_map(|b| b.bn_layers()))
            .collect()
    }
}
