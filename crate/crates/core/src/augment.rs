//! Crop sampling, differentiable crop-and-resize, flips and batch mixing.

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    RandomResizedCrop,
    /// Zero-padded (4 px) random crop at the input size plus a random flip.
    RandomCrop,
    Mixup,
    Cutmix,
}

impl std::str::FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_resized_crop" | "rrc" => Ok(Augmentation::RandomResizedCrop),
            "random_crop" | "crop" => Ok(Augmentation::RandomCrop),
            "mixup" => Ok(Augmentation::Mixup),
            "cutmix" => Ok(Augmentation::Cutmix),
            other => Err(Error::config(format!("unknown augmentation `{other}`"))),
        }
    }
}

/// Area-fraction and aspect-ratio ranges for random resized crops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
}

impl Default for CropParams {
    fn default() -> Self {
        Self {
            scale: (0.08, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

impl CropParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("crop scale range ({lo}, {hi}) must satisfy 0 < lo ≤ hi ≤ 1")));
        }
        let (rlo, rhi) = self.ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::config(format!("crop ratio range ({rlo}, {rhi}) is invalid")));
        }
        Ok(())
    }
}

/// A crop rectangle in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropRect {
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height: h,
            width: w,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.height > 0 && self.width > 0 && self.top + self.height <= h && self.left + self.width <= w
    }
}

/// Sample a crop with the RandomResizedCrop procedure: ten rejection
/// attempts on (area, log-uniform aspect), then a centred fallback crop.
pub fn sample_crop(rng: &mut Rng, h: usize, w: usize, params: &CropParams) -> CropRect {
    let area = (h * w) as f64;
    let (llo, lhi) = (params.ratio.0.ln(), params.ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(params.scale.0..=params.scale.1);
        let aspect = rng.random_range(llo..=lhi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && cw <= w && ch > 0 && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return CropRect {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < params.ratio.0 {
        (w, ((w as f64 / params.ratio.0).round() as usize).clamp(1, h))
    } else if in_ratio > params.ratio.1 {
        (((h as f64 * params.ratio.1).round() as usize).clamp(1, w), h)
    } else {
        (w, h)
    };
    CropRect {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

/// Row-stochastic `[out, full]` matrix that bilinearly resamples the window
/// `[start, start + len)` of a length-`full` axis to `out` samples
/// (half-pixel centres, edge clamping). `flip` reverses the output order.
pub fn resize_weights(full: usize, start: usize, len: usize, out: usize, flip: bool) -> Vec<f64> {
    let mut m = vec![0.0; out * full];
    let scale = len as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        let frac = src - i0 as f64;
        let row = if flip { out - 1 - o } else { o };
        m[row * full + start + i0] += 1.0 - frac;
        m[row * full + start + i1] += frac;
    }
    m
}

/// Crop each image of `x: [B, C, H, W]` to its rectangle, optionally flip it
/// horizontally, and resize to `out × out`. Differentiable in `x`.
pub fn crop_resize(x: &Tensor, rects: &[CropRect], flips: &[bool], out: usize) -> Result<Tensor> {
    let (b, _c, h, w) = x.dims4()?;
    if rects.len() != b || flips.len() != b {
        return Err(Error::Structural(format!(
            "{} images but {} crops and {} flip flags",
            b,
            rects.len(),
            flips.len()
        )));
    }
    let mut ry = Vec::with_capacity(b * out * h);
    let mut rx = Vec::with_capacity(b * out * w);
    for (r, &f) in rects.iter().zip(flips) {
        if !r.fits(h, w) {
            return Err(Error::Structural(format!("crop {r:?} exceeds a {h}×{w} image")));
        }
        ry.extend(resize_weights(h, r.top, r.height, out, false));
        rx.extend(resize_weights(w, r.left, r.width, out, f));
    }
    let dev = x.device();
    let ry = Tensor::from_vec(ry, (b, 1, out, h), dev)?.to_dtype(x.dtype())?;
    let rxt = Tensor::from_vec(rx, (b, 1, out, w), dev)?
        .to_dtype(x.dtype())?
        .transpose(2, 3)?
        .contiguous()?;
    let rows = ry.broadcast_matmul(x)?;
    Ok(rows.broadcast_matmul(&rxt)?)
}

/// Per-image random resized crop back to the input size, flipped with p = 0.5.
pub fn random_resized_crop_flip(x: &Tensor, params: &CropParams, rng: &mut Rng) -> Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    let rects: Vec<CropRect> = (0..b).map(|_| sample_crop(rng, h, w, params)).collect();
    let flips: Vec<bool> = (0..b).map(|_| rng.random_bool(0.5)).collect();
    crop_resize(x, &rects, &flips, h)
}

/// Per-image random crop from the zero-padded image (zero is the channel
/// mean in normalized space), flipped with p = 0.5.
pub fn random_crop_flip(x: &Tensor, pad: usize, rng: &mut Rng) -> Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    let padded = x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let dy = rng.random_range(0..=2 * pad);
        let dx = rng.random_range(0..=2 * pad);
        let img = padded.narrow(0, i, 1)?.narrow(2, dy, h)?.narrow(3, dx, w)?;
        out.push(if rng.random_bool(0.5) { hflip(&img)? } else { img });
    }
    Ok(Tensor::cat(&out, 0)?)
}

/// Horizontal flip of `[B, C, H, W]`.
pub fn hflip(x: &Tensor) -> Result<Tensor> {
    let w = x.dim(3)?;
    let idx: Vec<u32> = (0..w as u32).rev().collect();
    let idx = Tensor::new(idx.as_slice(), x.device())?;
    Ok(x.contiguous()?.index_select(&idx, 3)?)
}

/// Mixup interpolation weight, λ ~ Beta(α, α).
pub fn sample_mixup_lambda(rng: &mut Rng, alpha: f64) -> f64 {
    Beta::new(alpha, alpha).expect("positive alpha").sample(rng)
}

/// A CutMix box for λ ~ Beta(β, β): side lengths scale with √(1 − λ) and
/// the centre is uniform; the box is clipped to the image. Returns the box
/// and the area-corrected λ (fraction of the image kept).
pub fn sample_cutmix_box(rng: &mut Rng, h: usize, w: usize, beta: f64) -> (CropRect, f64) {
    let lam = Beta::new(beta, beta).expect("positive beta").sample(rng);
    let cut = (1.0 - lam).sqrt();
    let (cw, ch) = ((w as f64 * cut) as i64, (h as f64 * cut) as i64);
    let cx = rng.random_range(0..w as i64);
    let cy = rng.random_range(0..h as i64);
    let x1 = (cx - cw / 2).clamp(0, w as i64) as usize;
    let x2 = (cx + cw / 2).clamp(0, w as i64) as usize;
    let y1 = (cy - ch / 2).clamp(0, h as i64) as usize;
    let y2 = (cy + ch / 2).clamp(0, h as i64) as usize;
    let rect = CropRect {
        top: y1,
        left: x1,
        height: y2 - y1,
        width: x2 - x1,
    };
    let kept = 1.0 - (rect.height * rect.width) as f64 / (h * w) as f64;
    (rect, kept)
}

/// Mix a batch with a shuffled copy of itself. `targets` are `[B, K]`
/// distributions and are mixed with the same weight as the pixels.
pub fn mix_batch(x: &Tensor, targets: &Tensor, kind: Augmentation, strength: f64, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let (b, _c, h, w) = x.dims4()?;
    let mut perm: Vec<u32> = (0..b as u32).collect();
    perm.shuffle(rng);
    let perm = Tensor::new(perm.as_slice(), x.device())?;
    let xp = x.index_select(&perm, 0)?;
    let tp = targets.index_select(&perm, 0)?;
    let (mixed, lam) = match kind {
        Augmentation::Mixup => {
            let lam = sample_mixup_lambda(rng, strength);
            (((x * lam)? + (xp * (1.0 - lam))?)?, lam)
        }
        Augmentation::Cutmix => {
            let (rect, lam) = sample_cutmix_box(rng, h, w, strength);
            let mask = box_mask(h, w, &rect, x.device())?.to_dtype(x.dtype())?;
            let keep = mask.affine(-1.0, 1.0)?;
            (
                (x.broadcast_mul(&keep)? + xp.broadcast_mul(&mask)?)?,
                lam,
            )
        }
        other => return Err(Error::config(format!("{other:?} is not a mixing augmentation"))),
    };
    let t = ((targets * lam)? + (tp * (1.0 - lam))?)?;
    Ok((mixed, t))
}

/// `[1, 1, H, W]` mask that is 1 inside `rect`.
pub fn box_mask(h: usize, w: usize, rect: &CropRect, dev: &Device) -> Result<Tensor> {
    let mut m = vec![0f32; h * w];
    for y in rect.top..rect.top + rect.height {
        for x in rect.left..rect.left + rect.width {
            m[y * w + x] = 1.0;
        }
    }
    Ok(Tensor::from_vec(m, (1, 1, h, w), dev)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn sampled_crops_fit_and_respect_scale() {
        let p = CropParams::default();
        let mut rng = seed::stream(3, &[0]);
        for _ in 0..1000 {
            let r = sample_crop(&mut rng, 224, 224, &p);
            assert!(r.fits(224, 224));
            let frac = (r.height * r.width) as f64 / (224.0 * 224.0);
            // rounding each side to whole pixels moves the area by < 1.5%
            assert!(frac >= p.scale.0 * 0.985 && frac <= 1.0, "{frac}");
        }
    }

    #[test]
    fn identity_resize_is_exact() {
        let x = Tensor::arange(0f32, 2.0 * 3.0 * 5.0 * 5.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 5, 5))
            .unwrap();
        let rects = [CropRect::full(5, 5); 2];
        let y = crop_resize(&x, &rects, &[false, false], 5).unwrap();
        let d = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-5);
    }

    #[test]
    fn flip_in_resize_matches_hflip() {
        let x = Tensor::randn(0f32, 1.0, (1, 2, 6, 6), &Device::Cpu).unwrap();
        let r = [CropRect {
            top: 1,
            left: 2,
            height: 4,
            width: 3,
        }];
        let a = crop_resize(&x, &r, &[true], 8).unwrap();
        let b = hflip(&crop_resize(&x, &r, &[false], 8).unwrap()).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-6);
    }

    #[test]
    fn upsampling_matches_half_pixel_bilinear() {
        // 2 → 4 with half-pixel centres: sources at -0.25(→0), 0.25, 0.75, 1.25(→1)
        let m = resize_weights(2, 0, 2, 4, false);
        let x = [1.0, 3.0];
        let y: Vec<f64> = (0..4).map(|o| m[o * 2] * x[0] + m[o * 2 + 1] * x[1]).collect();
        assert_eq!(y, vec![1.0, 1.5, 2.5, 3.0]);
    }

    #[test]
    fn cutmix_lambda_matches_box_area() {
        let mut rng = seed::stream(1, &[]);
        for _ in 0..100 {
            let (r, lam) = sample_cutmix_box(&mut rng, 32, 32, 1.0);
            assert!(r.top + r.height <= 32 && r.left + r.width <= 32);
            assert!((lam - (1.0 - (r.height * r.width) as f64 / 1024.0)).abs() < 1e-12);
        }
    }
}
