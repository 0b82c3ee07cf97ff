//! Vision transformer with a configurable normalisation kind per site.
//!
//! A description lists, per block, the norm used before attention, the norm
//! used before the feed-forward network, the FFN layer widths, and whether a
//! BN sits between the FFN linears. `convert_ln_to_bn` in the model zoo
//! rewrites a LayerNorm description into its all-BN form.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{softmax, BatchNorm, Conv2d, LayerNorm, Linear, Pass};
use crate::nn::params::ParamInit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitBlockDescription {
    pub attn_norm: NormKind,
    pub ffn_norm: NormKind,
    /// Output width of each FFN linear layer, in order.
    pub ffn_dims: Vec<usize>,
    /// Insert a BN after the first FFN linear.
    pub ffn_inner_bn: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitDescription {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub blocks: Vec<VitBlockDescription>,
    pub final_norm: NormKind,
}

impl VitDescription {
    /// A standard pre-norm ViT with LayerNorm everywhere and a 4× MLP.
    pub fn layer_norm(image_size: usize, patch_size: usize, embed_dim: usize, depth: usize, heads: usize, num_classes: usize) -> Self {
        let block = VitBlockDescription {
            attn_norm: NormKind::LayerNorm,
            ffn_norm: NormKind::LayerNorm,
            ffn_dims: vec![4 * embed_dim, embed_dim],
            ffn_inner_bn: false,
        };
        Self {
            image_size,
            patch_size,
            in_channels: 3,
            embed_dim,
            heads,
            num_classes,
            blocks: vec![block; depth],
            final_norm: NormKind::LayerNorm,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embedding width {} not divisible into {} heads",
                self.embed_dim, self.heads
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.ffn_dims.last() != Some(&self.embed_dim) {
                return Err(Error::config(format!("block {i}: FFN must map back to the embedding width")));
            }
            if b.ffn_inner_bn && b.ffn_dims.len() != 2 {
                return Err(Error::config(format!("block {i}: inner BN needs exactly two FFN linears")));
            }
        }
        Ok(())
    }
}

enum Norm {
    Layer(LayerNorm),
    Batch(BatchNorm),
}

impl Norm {
    fn new(p: &mut ParamInit, name: &str, kind: NormKind, dim: usize) -> Result<Self> {
        Ok(match kind {
            NormKind::LayerNorm => Norm::Layer(LayerNorm::new(p, name, dim)?),
            NormKind::BatchNorm => Norm::Batch(p.batch_norm(name, dim)?),
        })
    }

    /// `[B, T, D]` in, same shape out. BN treats every token as a sample.
    fn forward(&self, x: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        match self {
            Norm::Layer(ln) => ln.forward(x),
            Norm::Batch(bn) => batch_norm_tokens(bn, x, pass),
        }
    }

    fn bn(&self) -> Option<&BatchNorm> {
        match self {
            Norm::Batch(bn) => Some(bn),
            Norm::Layer(_) => None,
        }
    }
}

fn batch_norm_tokens(bn: &BatchNorm, x: &Tensor, pass: &mut Pass) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let d = *dims.last().expect("token tensor has a feature dim");
    let flat = x.reshape(((), d))?;
    Ok(bn.forward(&flat, pass)?.reshape(dims)?)
}

struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        let q = qkv.get(0)?;
        let k = qkv.get(1)?;
        let v = qkv.get(2)?;
        let att = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        let att = softmax(&att)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        self.proj.forward(&out)
    }
}

struct Block {
    attn_norm: Norm,
    attn: Attention,
    ffn_norm: Norm,
    ffn: Vec<Linear>,
    ffn_bn: Option<BatchNorm>,
}

impl Block {
    fn new(p: &mut ParamInit, desc: &VitBlockDescription, dim: usize, heads: usize) -> Result<Self> {
        let attn_norm = Norm::new(p, "norm1", desc.attn_norm, dim)?;
        let attn = p.scoped("attn", |p| {
            Ok(Attention {
                qkv: Linear::new_normal(p, "qkv", dim, 3 * dim, 0.02)?,
                proj: Linear::new_normal(p, "proj", dim, dim, 0.02)?,
                heads,
            })
        })?;
        let ffn_norm = Norm::new(p, "norm2", desc.ffn_norm, dim)?;
        let mut ffn = Vec::new();
        let mut ffn_bn = None;
        p.scoped("mlp", |p| {
            let mut in_f = dim;
            for (i, &out_f) in desc.ffn_dims.iter().enumerate() {
                ffn.push(Linear::new_normal(p, &format!("fc{}", i + 1), in_f, out_f, 0.02)?);
                if i == 0 && desc.ffn_inner_bn {
                    ffn_bn = Some(p.batch_norm("bn", out_f)?);
                }
                in_f = out_f;
            }
            Ok(())
        })?;
        Ok(Self {
            attn_norm,
            attn,
            ffn_norm,
            ffn,
            ffn_bn,
        })
    }

    fn forward(&self, z: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        let z = (self.attn.forward(&self.attn_norm.forward(z, pass)?)? + z)?;
        let mut h = self.ffn_norm.forward(&z, pass)?;
        let last = self.ffn.len() - 1;
        for (i, lin) in self.ffn.iter().enumerate() {
            h = lin.forward(&h)?;
            if i == 0 {
                if let Some(bn) = &self.ffn_bn {
                    h = batch_norm_tokens(bn, &h, pass)?;
                }
            }
            if i != last {
                h = h.gelu_erf()?;
            }
        }
        Ok((h + z)?)
    }

    fn bn_layers(&self) -> impl Iterator<Item = &BatchNorm> {
        // construction order: norm1, norm2, mlp.bn
        self.attn_norm
            .bn()
            .into_iter()
            .chain(self.ffn_norm.bn())
            .chain(self.ffn_bn.as_ref())
    }
}

pub struct Vit {
    patch_embed: Conv2d,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: Norm,
    head: Linear,
    embed_dim: usize,
}

impl Vit {
    pub fn new(p: &mut ParamInit, desc: &VitDescription) -> Result<Self> {
        desc.validate()?;
        let d = desc.embed_dim;
        let patch_embed = Conv2d::new(p, "patch_embed", desc.in_channels, d, desc.patch_size, desc.patch_size, 0, true)?;
        let cls_token = p.normal("cls_token", &[1, 1, d], 0.02)?;
        let pos_embed = p.normal("pos_embed", &[1, desc.num_patches() + 1, d], 0.02)?;
        let mut blocks = Vec::with_capacity(desc.blocks.len());
        for (i, bd) in desc.blocks.iter().enumerate() {
            blocks.push(p.scoped(format!("blocks.{i}"), |p| Block::new(p, bd, d, desc.heads))?);
        }
        let norm = Norm::new(p, "norm", desc.final_norm, d)?;
        let head = Linear::new_normal(p, "head", d, desc.num_classes, 0.02)?;
        Ok(Self {
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
            embed_dim: d,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.embed_dim
    }

    /// Token sequence after the final norm: `[B, 1 + patches, D]`.
    pub fn forward_tokens(&self, x: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        let b = x.dim(0)?;
        let patches = self.patch_embed.forward(x)?.flatten_from(2)?.transpose(1, 2)?;
        let cls = self.cls_token.broadcast_as((b, 1, self.embed_dim))?;
        let mut z = Tensor::cat(&[&cls, &patches], 1)?.broadcast_add(&self.pos_embed)?;
        for blk in &self.blocks {
            z = blk.forward(&z, pass)?;
        }
        self.norm.forward(&z, pass)
    }

    pub fn features(&self, x: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        Ok(self.forward_tokens(x, pass)?.narrow(1, 0, 1)?.squeeze(1)?)
    }

    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        self.head.forward(features)
    }

    pub fn bn_layers(&self) -> Vec<&BatchNorm> {
        self.blocks
            .iter()
            .flat_map(|b| b.bn_layers())
            .chain(self.norm.bn())
            .collect()
    }
}
