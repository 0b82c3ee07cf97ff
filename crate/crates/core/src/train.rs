//! Losses, accuracy and batching helpers shared by the training stages.

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model_zoo::Network;
use crate::nn::{log_softmax, Pass};
use crate::seed::{self, streams};

/// Logit offset applied to classes excluded by a mask.
pub const MASK_OFFSET: f64 = -1e4;

pub fn one_hot(labels: &[usize], k: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0f32; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        v[i * k + l] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), k), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean cross-entropy of `[B, K]` logits against hard labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let idx = Tensor::from_vec(idx, (labels.len(), 1), logits.device())?;
    let picked = log_softmax(logits)?.gather(&idx, D::Minus1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Mean over the batch of `−Σ_c t_c log softmax(z)_c` for `[B, K]` targets.
pub fn soft_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let targets = targets.to_dtype(logits.dtype())?;
    let per = (log_softmax(logits)? * targets)?.sum(D::Minus1)?;
    Ok(per.mean_all()?.neg()?)
}

/// Add [`MASK_OFFSET`] to every logit column not listed in `allowed`.
pub fn mask_logits(logits: &Tensor, allowed: &[usize]) -> Result<Tensor> {
    let k = logits.dim(D::Minus1)?;
    let mut m = vec![MASK_OFFSET as f32; k];
    for &c in allowed {
        m[c] = 0.0;
    }
    let m = Tensor::from_vec(m, k, logits.device())?.to_dtype(logits.dtype())?;
    Ok(logits.broadcast_add(&m)?)
}

pub fn ensure_finite(value: f64, stage: &'static str, step: usize, last_finite: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            stage,
            step,
            detail: format!("loss became {value}; last finite step: {}", last_finite()),
        })
    }
}

/// Deterministic permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut seed::stream(seed, &[streams::SHUFFLE, epoch as u64]));
    v
}

/// Argmax predictions in evaluation mode, optionally restricted to `allowed`.
pub fn predict(net: &Network, images: &Tensor, allowed: Option<&[usize]>, batch: usize) -> Result<Vec<usize>> {
    let n = images.dim(0)?;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        let mut logits = net.forward(&images.narrow(0, start, len)?, &mut Pass::eval())?;
        if let Some(a) = allowed {
            logits = mask_logits(&logits, a)?;
        }
        out.extend(logits.argmax(D::Minus1)?.to_vec1::<u32>()?.into_iter().map(|v| v as usize));
        start += len;
    }
    Ok(out)
}

/// Top-1 accuracy on a labeled set, in `[0, 1]`.
pub fn top1(net: &Network, ds: &LabeledDataset, allowed: Option<&[usize]>) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    if ds.resolution != net.input_resolution() {
        return Err(Error::config(format!(
            "dataset resolution {} differs from model input {}",
            ds.resolution,
            net.input_resolution()
        )));
    }
    let mut correct = 0usize;
    for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(256) {
        let preds = predict(net, &ds.batch(chunk)?, allowed, 256)?;
        correct += preds.iter().zip(chunk).filter(|(p, &i)| **p == ds.labels[i]).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_matches_hand_value() {
        let logits = Tensor::new(&[[2.0f64, 0.0], [0.0, 0.0]], &Device::Cpu).unwrap();
        let ce = cross_entropy(&logits, &[0, 1]).unwrap().to_scalar::<f64>().unwrap();
        let want = 0.5 * ((1.0 + (-2f64).exp()).ln() + 2f64.ln());
        assert!((ce - want).abs() < 1e-12);
        let soft = soft_cross_entropy(&logits, &one_hot(&[0, 1], 2, DType::F64).unwrap()).unwrap();
        assert!((soft.to_scalar::<f64>().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn masking_hides_classes() {
        let logits = Tensor::new(&[[5.0f32, 1.0, 0.0]], &Device::Cpu).unwrap();
        let m = mask_logits(&logits, &[1, 2]).unwrap();
        assert_eq!(m.argmax(D::Minus1).unwrap().to_vec1::<u32>().unwrap(), vec![1]);
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(50, 3, 2);
        assert_eq!(o, epoch_order(50, 3, 2));
        assert_ne!(o, epoch_order(50, 3, 3));
        o.sort();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }
}
