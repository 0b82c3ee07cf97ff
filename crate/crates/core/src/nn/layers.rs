use std::sync::RwLock;

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::conv;
use crate::nn::params::{BnLayerStats, ParamInit};

/// Per-channel statistics of the activations entering one BN layer
/// (biased variance), as seen by the current batch. Tracked by autograd.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Forward-pass context.
///
/// In training mode BN normalises with batch statistics and updates its
/// running averages. In evaluation mode BN uses the stored running
/// statistics and never mutates them. Capture records the statistics of
/// every BN input in canonical order, independent of mode.
#[derive(Debug, Default)]
pub struct Pass {
    train: bool,
    capture: Option<Vec<BatchStats>>,
}

impl Pass {
    pub fn train() -> Self {
        Self { train: true, capture: None }
    }

    pub fn eval() -> Self {
        Self { train: false, capture: None }
    }

    pub fn eval_capturing() -> Self {
        Self {
            train: false,
            capture: Some(Vec::new()),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn take_stats(&mut self) -> Vec<BatchStats> {
        self.capture.take().unwrap_or_default()
    }
}

pub struct BatchNorm {
    index: usize,
    name: String,
    channels: usize,
    weight: Tensor,
    bias: Tensor,
    running: RwLock<(Tensor, Tensor)>,
    momentum: f64,
    eps: f64,
}

impl std::fmt::Debug for BatchNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BatchNorm")
            .field("index", &self.index)
            .field("name", &self.name)
            .field("channels", &self.channels)
            .finish()
    }
}

impl BatchNorm {
    pub(crate) fn new(index: usize, name: String, weight: Tensor, bias: Tensor, mean: Tensor, var: Tensor) -> Result<Self> {
        let channels = weight.dim(0)?;
        Ok(Self {
            index,
            name,
            channels,
            weight,
            bias,
            running: RwLock::new((mean, var)),
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Current running (mean, variance) tensors.
    pub fn running(&self) -> (Tensor, Tensor) {
        let guard = self.running.read().expect("BN lock poisoned");
        (guard.0.clone(), guard.1.clone())
    }

    pub fn stats(&self) -> Result<BnLayerStats> {
        let (m, v) = self.running();
        Ok(BnLayerStats {
            layer_index: self.index,
            running_mean: m.to_dtype(DType::F64)?.to_vec1()?,
            running_var: v.to_dtype(DType::F64)?.to_vec1()?,
        })
    }

    pub(crate) fn set_running(&self, stats: &BnLayerStats) -> Result<()> {
        if stats.running_mean.len() != self.channels || stats.running_var.len() != self.channels {
            return Err(Error::Structural(format!(
                "BN layer {} has {} channels, stats have {}",
                self.index,
                self.channels,
                stats.running_mean.len()
            )));
        }
        let dtype = self.weight.dtype();
        let dev = self.weight.device();
        let m = Tensor::new(stats.running_mean.as_slice(), dev)?.to_dtype(dtype)?;
        let v = Tensor::new(stats.running_var.as_slice(), dev)?.to_dtype(dtype)?;
        *self.running.write().expect("BN lock poisoned") = (m, v);
        Ok(())
    }

    /// Accepts `[B, C, H, W]` feature maps or `[N, C]` rows.
    pub fn forward(&self, x: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        let c = self.channels;
        let rank = x.rank();
        let bshape: Vec<usize> = match rank {
            4 => vec![1, c, 1, 1],
            2 => vec![1, c],
            _ => return Err(Error::Structural(format!("BN expects rank 2 or 4 input, got {rank}"))),
        };
        if x.dim(1)? != c {
            return Err(Error::Structural(format!(
                "BN layer {} expects {c} channels, got {}",
                self.index,
                x.dim(1)?
            )));
        }
        let need_batch = pass.train || pass.capture.is_some();
        let batch = if need_batch {
            let rows = if rank == 4 {
                x.transpose(0, 1)?.contiguous()?.reshape((c, ()))?
            } else {
                x.t()?.contiguous()?
            };
            let n = rows.dim(1)?;
            let mean = rows.mean(1)?;
            let var = rows.broadcast_sub(&mean.unsqueeze(1)?)?.sqr()?.mean(1)?;
            if let Some(cap) = pass.capture.as_mut() {
                cap.push(BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                });
            }
            Some((mean, var, n))
        } else {
            None
        };
        let (mean, var) = match (pass.train, batch) {
            (true, Some((mean, var, n))) => {
                let mut guard = self.running.write().expect("BN lock poisoned");
                let unbiased = if n > 1 {
                    (var.detach() * (n as f64 / (n - 1) as f64))?
                } else {
                    var.detach()
                };
                let m = self.momentum;
                let rm = ((&guard.0 * (1.0 - m))? + (mean.detach() * m)?)?;
                let rv = ((&guard.1 * (1.0 - m))? + (unbiased * m)?)?;
                *guard = (rm, rv);
                (mean, var)
            }
            _ => self.running(),
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let scale = (inv_std * &self.weight)?;
        let shift = (&self.bias - (mean * &scale)?)?;
        Ok(x
            .broadcast_mul(&scale.reshape(bshape.as_slice())?)?
            .broadcast_add(&shift.reshape(bshape.as_slice())?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Kaiming-normal (fan-out) initialisation, as torchvision does for ResNets.
    pub fn new(p: &mut ParamInit, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize, padding: usize, bias: bool) -> Result<Self> {
        p.scoped(name, |p| {
            let std = (2.0 / (out_c * k * k) as f64).sqrt();
            let weight = p.normal("weight", &[out_c, in_c, k, k], std)?;
            let bias = if bias {
                Some(p.constant("bias", &[out_c], 0.0)?)
            } else {
                None
            };
            Ok(Self {
                weight,
                bias,
                stride,
                padding,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv::conv2d(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: &mut ParamInit, name: &str, in_f: usize, out_f: usize) -> Result<Self> {
        let bound = 1.0 / (in_f as f64).sqrt();
        p.scoped(name, |p| {
            Ok(Self {
                weight: p.uniform("weight", &[out_f, in_f], bound)?,
                bias: p.uniform("bias", &[out_f], bound)?,
            })
        })
    }

    pub fn new_normal(p: &mut ParamInit, name: &str, in_f: usize, out_f: usize, std: f64) -> Result<Self> {
        p.scoped(name, |p| {
            Ok(Self {
                weight: p.normal("weight", &[out_f, in_f], std)?,
                bias: p.constant("bias", &[out_f], 0.0)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &mut ParamInit, name: &str, dim: usize) -> Result<Self> {
        p.scoped(name, |p| {
            Ok(Self {
                weight: p.constant("weight", &[dim], 1.0)?,
                bias: p.constant("bias", &[dim], 0.0)?,
                eps: 1e-6,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let y = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Numerically stable log-softmax over the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `[B, C, H, W]` → `[B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}
