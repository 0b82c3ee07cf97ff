use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::layers::BatchNorm;
use crate::seed::Rng;

/// Whether a network's weights take part in autograd.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    /// Weights are plain tensors; gradients only flow to the inputs.
    Frozen,
}

/// A named weight tensor. `var` is set for trainable networks.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub var: Option<Var>,
}

/// A flat, named array used for loading weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Running statistics for one BN layer, in canonical order.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BnLayerStats {
    pub layer_index: usize,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

enum Source<'a> {
    Random(Rng),
    Loaded {
        weights: HashMap<&'a str, &'a NamedArray>,
        bn: &'a [BnLayerStats],
    },
}

/// Creates parameters in construction order, either freshly initialised from
/// a seeded generator or copied from stored arrays.
pub struct ParamInit<'a> {
    source: Source<'a>,
    dtype: DType,
    mode: ParamMode,
    prefix: Vec<String>,
    params: Vec<Param>,
    bn_count: usize,
}

impl<'a> ParamInit<'a> {
    pub fn random(rng: Rng, dtype: DType, mode: ParamMode) -> Self {
        Self::with_source(Source::Random(rng), dtype, mode)
    }

    pub fn loaded(weights: &'a [NamedArray], bn: &'a [BnLayerStats], dtype: DType, mode: ParamMode) -> Self {
        let weights = weights.iter().map(|w| (w.name.as_str(), w)).collect();
        Self::with_source(Source::Loaded { weights, bn }, dtype, mode)
    }

    fn with_source(source: Source<'a>, dtype: DType, mode: ParamMode) -> Self {
        Self {
            source,
            dtype,
            mode,
            prefix: Vec::new(),
            params: Vec::new(),
            bn_count: 0,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    fn make(&mut self, name: &str, shape: &[usize], gen: impl FnOnce(&mut Rng, usize) -> Vec<f64>) -> Result<Tensor> {
        let full = self.full_name(name);
        let n: usize = shape.iter().product();
        let values = match &mut self.source {
            Source::Random(rng) => gen(rng, n),
            Source::Loaded { weights, .. } => {
                let arr = weights
                    .get(full.as_str())
                    .ok_or_else(|| Error::Structural(format!("missing weight `{full}`")))?;
                if arr.shape != shape {
                    return Err(Error::Structural(format!(
                        "weight `{full}` has shape {:?}, network expects {:?}",
                        arr.shape, shape
                    )));
                }
                arr.data.clone()
            }
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let (tensor, var) = match self.mode {
            ParamMode::Trainable => {
                let var = Var::from_tensor(&t)?;
                (var.as_tensor().clone(), Some(var))
            }
            ParamMode::Frozen => (t, None),
        };
        self.params.push(Param {
            name: full,
            tensor: tensor.clone(),
            var,
        });
        Ok(tensor)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        self.make(name, shape, |rng, n| {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(rng)).collect()
        })
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        self.make(name, shape, |rng, n| {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        })
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        self.make(name, shape, |_, n| vec![value; n])
    }

    /// Register a BN layer; its index is its position in construction order.
    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm> {
        let index = self.bn_count;
        self.bn_count += 1;
        let full = self.full_name(name);
        let (weight, bias) = self.scoped(name, |p| {
            Ok((p.constant("weight", &[channels], 1.0)?, p.constant("bias", &[channels], 0.0)?))
        })?;
        let (mean, var) = match &self.source {
            Source::Random(_) => (vec![0.0; channels], vec![1.0; channels]),
            Source::Loaded { bn, .. } => {
                let s = bn
                    .get(index)
                    .ok_or_else(|| Error::Structural(format!("missing running stats for BN layer {index}")))?;
                if s.layer_index != index || s.running_mean.len() != channels || s.running_var.len() != channels {
                    return Err(Error::Structural(format!(
                        "BN layer {index} stats do not match a {channels}-channel layer"
                    )));
                }
                (s.running_mean.clone(), s.running_var.clone())
            }
        };
        let mean = Tensor::from_vec(mean, channels, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Tensor::from_vec(var, channels, &Device::Cpu)?.to_dtype(self.dtype)?;
        BatchNorm::new(index, full, weight, bias, mean, var)
    }

    pub fn finish(self) -> Vec<Param> {
        self.params
    }
}
