//! Stage 2: synthesize images from Gaussian noise against a frozen model.
//!
//! Each step crops every image once, resizes the crop to the model input,
//! and minimises
//!
//! ```text
//! total = α_ce·CE + α_bn·R_bn + α_tv·R_tv + α_l2·R_l2
//! R_bn  = Σ_l ‖μ_l − RM_l‖₂ + Σ_l ‖σ²_l − RV_l‖₂
//! ```
//!
//! where `μ_l, σ²_l` are the biased per-channel statistics of the crops'
//! activations entering BN layer `l` and `RM_l, RV_l` its running
//! statistics. `R_tv` and `R_l2` are per-image priors on the resized crops,
//! averaged over the batch. Only pixels inside each image's crop are
//! updated (masked Adam); all other pixels and their optimizer moments stay
//! bitwise unchanged.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{crop_resize, sample_crop, CropParams, CropRect};
use crate::data::{normalization_for, save_condensed, CondensedDataset, Normalization, Provenance, CHANNELS};
use crate::error::{Error, IoContext, Result};
use crate::model_zoo::{Checkpoint, Network};
use crate::nn::{BatchStats, BnLayerStats, ParamMode, Pass};
use crate::optim::cosine_lr;
use crate::seed::{self, streams, Rng};
use crate::train::cross_entropy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianInit {
    pub mean: f64,
    pub std: f64,
}

impl Default for GaussianInit {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Clamp {
    /// The normalized image of raw `[0, 1]`, per channel.
    UnitInterval,
    Range { min: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverConfig {
    /// Weight of the cross-entropy term; 1 in every published recipe.
    #[serde(default = "one")]
    pub alpha_ce: f64,
    pub alpha_bn: f64,
    #[serde(default)]
    pub alpha_tv: f64,
    #[serde(default)]
    pub alpha_l2: f64,
    #[serde(default = "two")]
    pub tv_beta: f64,
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    pub batch_size: usize,
    pub iterations: usize,
    #[serde(default)]
    pub crop: CropParams,
    #[serde(default)]
    pub init: GaussianInit,
    #[serde(default)]
    pub clamp: Option<Clamp>,
    pub ipc: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn two() -> f64 {
    2.0
}

fn default_betas() -> (f64, f64) {
    (0.5, 0.9)
}

impl RecoverConfig {
    /// Recipe keyed by input resolution: 32 px follows the CIFAR setting,
    /// 64 px the Tiny-ImageNet setting, 224 px the ImageNet setting.
    pub fn for_resolution(resolution: usize, ipc: usize) -> Self {
        let (alpha_bn, lr, iterations) = match resolution {
            r if r <= 32 => (0.01, 0.25, 1000),
            r if r <= 64 => (1.0, 0.1, 1000),
            _ => (0.01, 0.25, 2000),
        };
        Self {
            alpha_ce: 1.0,
            alpha_bn,
            alpha_tv: 0.0,
            alpha_l2: 0.0,
            tv_beta: 2.0,
            lr,
            betas: default_betas(),
            batch_size: 100,
            iterations,
            crop: CropParams::default(),
            init: GaussianInit::default(),
            clamp: None,
            ipc,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.ipc == 0 || self.batch_size == 0 {
            return Err(Error::config("iterations, ipc and batch size must be ≥ 1"));
        }
        for (name, a) in [
            ("alpha_ce", self.alpha_ce),
            ("alpha_bn", self.alpha_bn),
            ("alpha_tv", self.alpha_tv),
            ("alpha_l2", self.alpha_l2),
        ] {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::config(format!("{name} must be a finite value ≥ 0, got {a}")));
            }
        }
        if !(self.lr > 0.0) || !(self.tv_beta > 0.0) || !(self.init.std >= 0.0) {
            return Err(Error::config("lr and tv_beta must be positive, init std ≥ 0"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if let Some(Clamp::Range { min, max }) = self.clamp {
            if !(min < max) {
                return Err(Error::config("clamp min must be below max"));
            }
        }
        self.crop.validate()
    }

    /// SHA-256 of the canonical JSON form; changes with every field.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Per-term values of one recovery step. `total` is recomposed from the
/// terms and the configured weights.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RecoveryLossBreakdown {
    pub ce: f64,
    pub r_bn: f64,
    pub r_tv: f64,
    pub r_l2: f64,
    pub total: f64,
}

impl RecoveryLossBreakdown {
    pub fn compose(cfg: &RecoverConfig, ce: f64, r_bn: f64, r_tv: f64, r_l2: f64) -> Self {
        Self {
            ce,
            r_bn,
            r_tv,
            r_l2,
            total: cfg.alpha_ce * ce + cfg.alpha_bn * r_bn + cfg.alpha_tv * r_tv + cfg.alpha_l2 * r_l2,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.r_bn, self.r_tv, self.r_l2, self.total].iter().all(|v| v.is_finite())
    }
}

/// Learnable images with fixed targets and masked-Adam state.
#[derive(Debug)]
pub struct SyntheticBatch {
    images: Var,
    targets: Vec<usize>,
    /// Position of each image in the class-major condensed layout.
    slots: Vec<usize>,
    m: Tensor,
    v: Tensor,
    pub iteration: usize,
    last: Option<RecoveryLossBreakdown>,
    last_crops: Vec<CropRect>,
}

impl SyntheticBatch {
    pub fn from_tensor(images: Tensor, targets: Vec<usize>) -> Result<Self> {
        let b = images.dims4()?.0;
        if targets.len() != b {
            return Err(Error::Structural(format!("{b} images but {} targets", targets.len())));
        }
        Ok(Self {
            m: images.zeros_like()?,
            v: images.zeros_like()?,
            images: Var::from_tensor(&images)?,
            slots: (0..b).collect(),
            targets,
            iteration: 0,
            last: None,
            last_crops: Vec::new(),
        })
    }

    pub fn images(&self) -> &Tensor {
        self.images.as_tensor()
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    /// Crops sampled by the most recent step.
    pub fn last_crops(&self) -> &[CropRect] {
        &self.last_crops
    }

    pub fn last_breakdown(&self) -> Option<RecoveryLossBreakdown> {
        self.last
    }

    pub fn to_dtype(self, dtype: DType) -> Result<Self> {
        let mut out = Self::from_tensor(self.images.as_tensor().to_dtype(dtype)?, self.targets)?;
        out.slots = self.slots;
        Ok(out)
    }
}

/// Gaussian-initialised batches, `ipc` images per class, packed round-robin
/// over classes (image `k` of every class before image `k + 1` of any) and
/// split into batches of `cfg.batch_size`. The pixels of image `k` of class
/// `c` depend only on `(seed, c, k)`.
pub fn init_synthetic(ipc: usize, class_ids: &[usize], resolution: usize, cfg: &RecoverConfig, seed: u64) -> Result<Vec<SyntheticBatch>> {
    if ipc == 0 || class_ids.is_empty() {
        return Err(Error::config("need ipc ≥ 1 and at least one class"));
    }
    let normal = Normal::new(cfg.init.mean, cfg.init.std).map_err(|e| Error::config(e.to_string()))?;
    let n = CHANNELS * resolution * resolution;
    let mut order = Vec::with_capacity(ipc * class_ids.len());
    for k in 0..ipc {
        for (pos, &c) in class_ids.iter().enumerate() {
            order.push((pos * ipc + k, c, k));
        }
    }
    order
        .chunks(cfg.batch_size)
        .map(|chunk| {
            let mut px = Vec::with_capacity(chunk.len() * n);
            for &(_, c, k) in chunk {
                let mut rng = seed::stream(seed, &[streams::SYNTH_INIT, c as u64, k as u64]);
                px.extend((0..n).map(|_| normal.sample(&mut rng) as f32));
            }
            let t = Tensor::from_vec(px, (chunk.len(), CHANNELS, resolution, resolution), &Device::Cpu)?;
            let mut b = SyntheticBatch::from_tensor(t, chunk.iter().map(|e| e.1).collect())?;
            b.slots = chunk.iter().map(|e| e.0).collect();
            Ok(b)
        })
        .collect()
}

/// `where(x > 0, f(x), 0)` with the gradient of the unused branch kept finite.
fn positive_part(x: &Tensor, f: impl Fn(&Tensor) -> candle_core::Result<Tensor>) -> Result<Tensor> {
    let pos = x.gt(0.0)?;
    let safe = pos.where_cond(x, &x.ones_like()?)?;
    Ok(pos.where_cond(&f(&safe)?, &x.zeros_like()?)?)
}

/// Euclidean norm with a zero (not NaN) gradient at the origin.
fn safe_norm(x: &Tensor) -> Result<Tensor> {
    let ss = x.sqr()?.sum_all()?;
    positive_part(&ss, |t| t.sqrt())
}

/// Total variation, summed over every leading index and channel:
/// `Σ ((x[i,j+1] − x[i,j])² + (x[i+1,j] − x[i,j])²)^{β/2}`, where a missing
/// right or lower neighbour contributes a zero difference. Input is
/// `[..., H, W]` with `H, W ≥ 2`.
pub fn tv_regularizer(x: &Tensor, beta: f64) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(Error::Structural("TV needs a spatial image".into()));
    }
    let (h, w) = (x.dim(r - 2)?, x.dim(r - 1)?);
    if h < 2 || w < 2 {
        return Err(Error::Structural(format!("TV needs H, W ≥ 2, got {h}×{w}")));
    }
    let dh = (x.narrow(r - 1, 1, w - 1)? - x.narrow(r - 1, 0, w - 1)?)?.pad_with_zeros(r - 1, 0, 1)?;
    let dv = (x.narrow(r - 2, 1, h - 1)? - x.narrow(r - 2, 0, h - 1)?)?.pad_with_zeros(r - 2, 0, 1)?;
    let s = (dh.sqr()? + dv.sqr()?)?;
    let p = if beta == 2.0 { s } else { positive_part(&s, |t| t.powf(beta / 2.0))? };
    Ok(p.sum_all()?)
}

/// Euclidean norm over all pixels and channels.
pub fn l2_regularizer(x: &Tensor) -> Result<Tensor> {
    safe_norm(x)
}

/// `Σ_l ‖μ_l − RM_l‖₂ + Σ_l ‖σ²_l − RV_l‖₂`.
pub fn bn_matching_loss(batch_stats: &[BatchStats], reference: &[BnLayerStats]) -> Result<Tensor> {
    if batch_stats.len() != reference.len() {
        return Err(Error::Structural(format!(
            "{} captured BN layers but {} reference layers",
            batch_stats.len(),
            reference.len()
        )));
    }
    if batch_stats.is_empty() {
        return Err(Error::Structural("no BN layers to match".into()));
    }
    let mut total: Option<Tensor> = None;
    for (l, (s, r)) in batch_stats.iter().zip(reference).enumerate() {
        let c = s.mean.dim(0)?;
        if r.running_mean.len() != c || r.running_var.len() != c || s.var.dim(0)? != c {
            return Err(Error::Structural(format!(
                "BN layer {l}: batch has {c} channels, reference {}",
                r.running_mean.len()
            )));
        }
        let dev = s.mean.device();
        let rm = Tensor::new(r.running_mean.as_slice(), dev)?.to_dtype(s.mean.dtype())?;
        let rv = Tensor::new(r.running_var.as_slice(), dev)?.to_dtype(s.var.dtype())?;
        let term = (safe_norm(&(&s.mean - rm)?)? + safe_norm(&(&s.var - rv)?)?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// A frozen network plus its reference statistics.
pub struct FrozenModel {
    net: Network,
    reference: Vec<BnLayerStats>,
}

impl FrozenModel {
    pub fn new(net: Network) -> Result<Self> {
        if !net.vars().is_empty() {
            return Err(Error::config("recovery needs a frozen network (no trainable variables)"));
        }
        let reference = net.bn_stats()?;
        if reference.is_empty() {
            return Err(Error::Structural("model has no BN layers and cannot drive recovery".into()));
        }
        Ok(Self { net, reference })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        Self::new(Network::from_checkpoint_as(ckpt, dtype, ParamMode::Frozen)?)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn reference(&self) -> &[BnLayerStats] {
        &self.reference
    }
}

/// The composite objective on fixed crops. Returns the differentiable total
/// and the breakdown.
pub fn recovery_loss(model: &FrozenModel, images: &Tensor, targets: &[usize], crops: &[CropRect], cfg: &RecoverConfig) -> Result<(Tensor, RecoveryLossBreakdown)> {
    let net = model.network();
    let b = images.dim(0)?;
    let x = crop_resize(&images.to_dtype(net.dtype())?, crops, &vec![false; b], net.input_resolution())?;
    let mut pass = Pass::eval_capturing();
    let logits = net.forward(&x, &mut pass)?;
    let ce = cross_entropy(&logits, targets)?;
    let r_bn = bn_matching_loss(&pass.take_stats(), model.reference())?;
    let r_tv = (tv_regularizer(&x, cfg.tv_beta)? / b as f64)?;
    let mut norms = Vec::with_capacity(b);
    for i in 0..b {
        norms.push(l2_regularizer(&x.get(i)?)?);
    }
    let r_l2 = (Tensor::stack(&norms, 0)?.sum_all()? / b as f64)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let breakdown = RecoveryLossBreakdown::compose(cfg, scalar(&ce)?, scalar(&r_bn)?, scalar(&r_tv)?, scalar(&r_l2)?);
    let mut total = (ce * cfg.alpha_ce)?;
    for (a, t) in [(cfg.alpha_bn, r_bn), (cfg.alpha_tv, r_tv), (cfg.alpha_l2, r_l2)] {
        if a != 0.0 {
            total = (total + (t * a)?)?;
        }
    }
    Ok((total, breakdown))
}

fn crop_mask(b: usize, h: usize, w: usize, crops: &[CropRect], dims: &[usize]) -> Result<Tensor> {
    let mut m = vec![0u8; b * h * w];
    for (i, r) in crops.iter().enumerate() {
        for y in r.top..r.top + r.height {
            for x in r.left..r.left + r.width {
                m[i * h * w + y * w + x] = 1;
            }
        }
    }
    Ok(Tensor::from_vec(m, (b, 1, h, w), &Device::Cpu)?.broadcast_as(dims)?.contiguous()?)
}

fn clamp_bounds(clamp: &Clamp, norm: &Normalization) -> [(f64, f64); CHANNELS] {
    match *clamp {
        Clamp::UnitInterval => norm.unit_interval(),
        Clamp::Range { min, max } => [(min, max); CHANNELS],
    }
}

/// One masked-Adam step on freshly sampled crops. The learning rate follows
/// the cosine schedule over `cfg.iterations`.
pub fn recover_step(batch: &mut SyntheticBatch, model: &FrozenModel, cfg: &RecoverConfig, rng: &mut Rng) -> Result<RecoveryLossBreakdown> {
    recover_step_with(batch, model, cfg, None, rng)
}

fn recover_step_with(batch: &mut SyntheticBatch, model: &FrozenModel, cfg: &RecoverConfig, norm: Option<&Normalization>, rng: &mut Rng) -> Result<RecoveryLossBreakdown> {
    let x = batch.images.as_tensor().clone();
    let dims = x.dims().to_vec();
    let (b, _, h, w) = x.dims4()?;
    let crops: Vec<CropRect> = (0..b).map(|_| sample_crop(rng, h, w, &cfg.crop)).collect();
    let (total, breakdown) = recovery_loss(model, &x, &batch.targets, &crops, cfg)?;
    if !breakdown.is_finite() {
        return Err(Error::Divergence {
            stage: "recover",
            step: batch.iteration,
            detail: format!("non-finite loss {breakdown:?}; last finite step: {:?}", batch.last),
        });
    }
    let grads = total.backward()?;
    let x = x.detach();
    let g = match grads.get(batch.images.as_tensor()) {
        Some(g) => g.detach(),
        None => x.zeros_like()?,
    };
    let lr = cosine_lr(cfg.lr, batch.iteration, cfg.iterations);
    let t = (batch.iteration + 1) as i32;
    let (b1, b2) = cfg.betas;
    let m_new = ((&batch.m * b1)? + (&g * (1.0 - b1))?)?;
    let v_new = ((&batch.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
    let mhat = (&m_new / (1.0 - b1.powi(t)))?;
    let vhat = (&v_new / (1.0 - b2.powi(t)))?;
    let mut stepped = (&x - ((mhat / (vhat.sqrt()? + 1e-8)?)? * lr)?)?;
    if let Some(c) = &cfg.clamp {
        let norm = norm.copied().unwrap_or(normalization_for("imagenet")?);
        let chans: Vec<Tensor> = clamp_bounds(c, &norm)
            .iter()
            .enumerate()
            .map(|(ch, &(lo, hi))| stepped.narrow(1, ch, 1)?.clamp(lo, hi))
            .collect::<candle_core::Result<_>>()?;
        stepped = Tensor::cat(&chans, 1)?;
    }
    let mask = crop_mask(b, h, w, &crops, &dims)?;
    batch.images.set(&mask.where_cond(&stepped, &x)?)?;
    batch.m = mask.where_cond(&m_new, &batch.m)?;
    batch.v = mask.where_cond(&v_new, &batch.v)?;
    batch.iteration += 1;
    batch.last = Some(breakdown);
    batch.last_crops = crops;
    Ok(breakdown)
}

/// Outcome of a full recovery run.
#[derive(Debug, Clone)]
pub struct RecoverReport {
    pub condensed: CondensedDataset,
    /// Per-iteration breakdown averaged over batches, weighted by batch size.
    pub losses: Vec<RecoveryLossBreakdown>,
    pub wall_seconds: f64,
    pub ms_per_image: f64,
}

/// Recover `cfg.ipc` images for each class in `class_ids`.
pub fn recover(checkpoint: &Checkpoint, cfg: &RecoverConfig, class_ids: &[usize]) -> Result<CondensedDataset> {
    Ok(recover_report(checkpoint, cfg, class_ids, None)?.condensed)
}

/// As [`recover`], additionally returning losses and timing. When a step
/// fails and `partial_dir` is given, the current images are saved there
/// before the error is returned.
pub fn recover_report(checkpoint: &Checkpoint, cfg: &RecoverConfig, class_ids: &[usize], partial_dir: Option<&Path>) -> Result<RecoverReport> {
    cfg.validate()?;
    let k = checkpoint.spec.num_classes;
    let mut seen = vec![false; k];
    for &c in class_ids {
        if c >= k || std::mem::replace(&mut seen[c], true) {
            return Err(Error::config(format!("class id {c} is out of range or repeated (model has {k} classes)")));
        }
    }
    let model = FrozenModel::from_checkpoint(checkpoint, checkpoint.precision.dtype())?;
    let res = checkpoint.spec.input_resolution;
    let norm = match checkpoint.meta.normalization {
        Some(n) => n,
        None => {
            log::warn!("checkpoint records no normalization; assuming ImageNet constants");
            normalization_for("imagenet")?
        }
    };
    let provenance = Provenance {
        checkpoint_id: checkpoint.id()?,
        recover_config_hash: cfg.hash(),
        iterations: cfg.iterations,
        seed: cfg.seed,
    };
    let mut batches = init_synthetic(cfg.ipc, class_ids, res, cfg, cfg.seed)?
        .into_iter()
        .map(|b| b.to_dtype(model.network().dtype()))
        .collect::<Result<Vec<_>>>()?;
    let total_images: usize = batches.iter().map(|b| b.targets.len()).sum();
    let start = Instant::now();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut acc = RecoveryLossBreakdown::default();
        for (bi, batch) in batches.iter_mut().enumerate() {
            let mut rng = seed::stream(cfg.seed, &[streams::RECOVER_CROP, bi as u64, it as u64]);
            let step = recover_step_with(batch, &model, cfg, Some(&norm), &mut rng);
            let br = match step {
                Ok(br) => br,
                Err(e) => {
                    if let Some(dir) = partial_dir {
                        let mut partial = assemble(&batches, cfg, class_ids, k, res, &norm, provenance.clone())?;
                        partial.provenance.iterations = it;
                        save_condensed(&partial, dir)?;
                        log::error!("recovery failed at iteration {it}; partial images saved to {}", dir.display());
                    }
                    return Err(e);
                }
            };
            let wgt = batch.targets.len() as f64 / total_images as f64;
            acc.ce += wgt * br.ce;
            acc.r_bn += wgt * br.r_bn;
            acc.r_tv += wgt * br.r_tv;
            acc.r_l2 += wgt * br.r_l2;
            acc.total += wgt * br.total;
        }
        if it % 100 == 0 || it + 1 == cfg.iterations {
            log::info!("recover iter {it}: total {:.5} (ce {:.5}, r_bn {:.5})", acc.total, acc.ce, acc.r_bn);
        }
        losses.push(acc);
    }
    let wall_seconds = start.elapsed().as_secs_f64();
    let condensed = assemble(&batches, cfg, class_ids, k, res, &norm, provenance)?;
    Ok(RecoverReport {
        condensed,
        losses,
        wall_seconds,
        ms_per_image: wall_seconds * 1e3 / total_images as f64,
    })
}

fn assemble(batches: &[SyntheticBatch], cfg: &RecoverConfig, class_ids: &[usize], num_classes: usize, res: usize, norm: &Normalization, provenance: Provenance) -> Result<CondensedDataset> {
    let n = CHANNELS * res * res;
    let total = cfg.ipc * class_ids.len();
    let mut images = vec![0f32; total * n];
    for b in batches {
        let px: Vec<f32> = b.images().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        for (j, &slot) in b.slots.iter().enumerate() {
            images[slot * n..(slot + 1) * n].copy_from_slice(&px[j * n..(j + 1) * n]);
        }
    }
    let cd = CondensedDataset {
        ipc: cfg.ipc,
        class_ids: class_ids.to_vec(),
        num_classes,
        resolution: res,
        normalization: *norm,
        images,
        hard_labels: (0..total).map(|i| class_ids[i / cfg.ipc]).collect(),
        provenance,
    };
    cd.validate()?;
    Ok(cd)
}

/// Write `iter,ce,r_bn,r_tv,r_l2,total` rows.
pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[RecoveryLossBreakdown]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
    writeln!(f, "iter,ce,r_bn,r_tv,r_l2,total").at(path)?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{i},{},{},{},{},{}", l.ce, l.r_bn, l.r_tv, l.r_l2, l.total).at(path)?;
    }
    f.flush().at(path)
}
