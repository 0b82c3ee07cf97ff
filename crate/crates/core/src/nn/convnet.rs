use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm, Conv2d, Linear, Pass};
use crate::nn::params::ParamInit;

/// A stack of `conv3x3 → BN → ReLU → avgpool2` blocks followed by a linear
/// classifier over the flattened final feature map.
///
/// Pooling stops once the map is 1×1, so shallow inputs remain valid.
pub struct ConvNet {
    blocks: Vec<Block>,
    head: Linear,
    feature_dim: usize,
}

struct Block {
    conv: Conv2d,
    bn: BatchNorm,
    pool: bool,
}

impl ConvNet {
    pub fn new(p: &mut ParamInit, in_channels: usize, resolution: usize, width: usize, depth: usize, num_classes: usize) -> Result<Self> {
        if depth == 0 || width == 0 {
            return Err(Error::config("convnet needs depth ≥ 1 and width ≥ 1"));
        }
        let mut blocks = Vec::with_capacity(depth);
        let mut size = resolution;
        let mut in_c = in_channels;
        for i in 0..depth {
            let (conv, bn) = p.scoped(format!("features.{i}"), |p| {
                Ok((Conv2d::new(p, "conv", in_c, width, 3, 1, 1, false)?, p.batch_norm("bn", width)?))
            })?;
            let pool = size >= 2;
            if pool {
                size /= 2;
            }
            blocks.push(Block { conv, bn, pool });
            in_c = width;
        }
        let feature_dim = width * size * size;
        let head = Linear::new(p, "classifier", feature_dim, num_classes)?;
        Ok(Self {
            blocks,
            head,
            feature_dim,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self, x: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.bn.forward(&b.conv.forward(&h)?, pass)?.relu()?;
            if b.pool {
                h = h.avg_pool2d(2)?;
            }
        }
        Ok(h.flatten_from(1)?)
    }

    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        self.head.forward(features)
    }

    pub fn bn_layers(&self) -> Vec<&BatchNorm> {
        self.blocks.iter().map(|b| &b.bn).collect()
    }
}
