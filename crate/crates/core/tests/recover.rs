mod common;

use candle_core::{DType, Device, Tensor, Var};
use condense::augment::CropRect;
use condense::data::load_condensed;
use condense::model_zoo::{ArchId, BackboneSpec, CheckpointMeta, Network};
use condense::nn::{BatchStats, BnLayerStats, ParamMode, Pass};
use condense::recover::{
    bn_matching_loss, init_synthetic, l2_regularizer, recover, recover_report, recover_step, recovery_loss, tv_regularizer, Clamp,
    FrozenModel, GaussianInit, RecoverConfig, RecoveryLossBreakdown, SyntheticBatch,
};
use condense::seed;
use condense::Error;
use proptest::prelude::*;

fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn scalar(x: &Tensor) -> f64 {
    x.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Deterministic, irregular values in roughly [-1, 1].
fn wiggle(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 * 1.618 + phase) * 2.399).sin() * ((i as f64 * 0.37 + phase).cos() + 0.3)).collect()
}

fn tv_oracle(x: &[f64], c: usize, h: usize, w: usize, beta: f64) -> f64 {
    let at = |ch: usize, i: usize, j: usize| x[ch * h * w + i * w + j];
    let mut total = 0.0;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let dh = if j + 1 < w { at(ch, i, j + 1) - at(ch, i, j) } else { 0.0 };
                let dv = if i + 1 < h { at(ch, i + 1, j) - at(ch, i, j) } else { 0.0 };
                total += (dh * dh + dv * dv).powf(beta / 2.0);
            }
        }
    }
    total
}

fn bn_oracle(layers: &[(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    layers.iter().map(|(m, v, rm, rv)| dist(m, rm) + dist(v, rv)).sum()
}

fn stats(mean: &[f64], var: &[f64]) -> BatchStats {
    BatchStats {
        mean: t(mean.to_vec(), &[mean.len()]),
        var: t(var.to_vec(), &[var.len()]),
    }
}

fn reference(i: usize, rm: &[f64], rv: &[f64]) -> BnLayerStats {
    BnLayerStats {
        layer_index: i,
        running_mean: rm.to_vec(),
        running_var: rv.to_vec(),
    }
}

#[test]
fn tv_hand_cases() {
    let x = t(vec![0.0, 1.0, 0.0, 1.0], &[1, 2, 2]);
    assert!((scalar(&tv_regularizer(&x, 2.0).unwrap()) - 2.0).abs() < 1e-12);
    assert!((scalar(&tv_regularizer(&x, 1.0).unwrap()) - 2.0).abs() < 1e-12);
    let flat = t(vec![0.7; 3 * 4 * 4], &[3, 4, 4]);
    assert_eq!(scalar(&tv_regularizer(&flat, 2.0).unwrap()), 0.0);
    assert_eq!(scalar(&tv_regularizer(&flat, 1.0).unwrap()), 0.0);
}

#[test]
fn tv_rejects_degenerate_images() {
    assert!(matches!(tv_regularizer(&t(vec![1.0, 2.0], &[1, 1, 2]), 2.0), Err(Error::Structural(_))));
}

#[test]
fn l2_hand_cases_and_oracle() {
    assert_eq!(scalar(&l2_regularizer(&t(vec![0.0; 12], &[3, 2, 2])).unwrap()), 0.0);
    let mut one = vec![0.0; 12];
    one[5] = 1.0;
    assert!((scalar(&l2_regularizer(&t(one, &[3, 2, 2])).unwrap()) - 1.0).abs() < 1e-12);
    let v = wiggle(48, 0.2);
    let oracle = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((scalar(&l2_regularizer(&t(v, &[3, 4, 4])).unwrap()) - oracle).abs() <= 1e-6);
}

#[test]
fn l2_gradient_at_zero_is_finite() {
    let x = Var::from_tensor(&t(vec![0.0; 8], &[2, 2, 2])).unwrap();
    let g = l2_regularizer(x.as_tensor()).unwrap().backward().unwrap();
    let g: Vec<f64> = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert!(g.iter().all(|v| v.is_finite()));
}

#[test]
fn bn_matching_hand_cases() {
    let one = bn_matching_loss(&[stats(&[1.0], &[1.0])], &[reference(0, &[0.0], &[1.0])]).unwrap();
    assert!((scalar(&one) - 1.0).abs() < 1e-12);
    let same = bn_matching_loss(&[stats(&[0.3, -0.2], &[1.5, 0.7])], &[reference(0, &[0.3, -0.2], &[1.5, 0.7])]).unwrap();
    assert_eq!(scalar(&same), 0.0);
}

#[test]
fn bn_matching_matches_oracle_and_is_additive() {
    let layers = vec![
        (wiggle(3, 0.1), wiggle(3, 0.2).iter().map(|v| v.abs() + 0.1).collect(), wiggle(3, 0.3), vec![1.0, 0.5, 2.0]),
        (wiggle(4, 1.1), vec![0.4, 0.9, 1.2, 0.3], vec![0.0; 4], vec![1.0; 4]),
    ];
    let batch: Vec<BatchStats> = layers.iter().map(|(m, v, _, _)| stats(m, v)).collect();
    let refs: Vec<BnLayerStats> = layers.iter().enumerate().map(|(i, (_, _, rm, rv))| reference(i, rm, rv)).collect();
    let both = scalar(&bn_matching_loss(&batch, &refs).unwrap());
    assert!((both - bn_oracle(&layers)).abs() <= 1e-6);
    let first = scalar(&bn_matching_loss(&batch[..1], &refs[..1]).unwrap());
    let second = scalar(&bn_matching_loss(&batch[1..], &refs[1..]).unwrap());
    assert!((both - (first + second)).abs() <= 1e-12);
}

#[test]
fn bn_matching_shape_errors() {
    let s = [stats(&[0.0, 0.0], &[1.0, 1.0])];
    assert!(matches!(bn_matching_loss(&s, &[reference(0, &[0.0], &[1.0])]), Err(Error::Structural(_))));
    assert!(matches!(bn_matching_loss(&s, &[]), Err(Error::Structural(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tv_matches_brute_force(c in 1usize..=3, h in 2usize..=4, w in 2usize..=4, beta in prop::sample::select(vec![1.0, 1.5, 2.0, 3.0]), phase in 0.0f64..10.0) {
        let v = wiggle(c * h * w, phase);
        let got = scalar(&tv_regularizer(&t(v.clone(), &[c, h, w]), beta).unwrap());
        prop_assert!((got - tv_oracle(&v, c, h, w, beta)).abs() <= 1e-6);
    }

    #[test]
    fn l2_matches_brute_force(v in prop::collection::vec(-3.0f64..3.0, 1..=48)) {
        let oracle = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n = v.len();
        prop_assert!((scalar(&l2_regularizer(&t(v, &[n])).unwrap()) - oracle).abs() <= 1e-6);
    }

    #[test]
    fn bn_matching_matches_brute_force(m in prop::collection::vec(-2.0f64..2.0, 1..=4), shift in -1.0f64..1.0, scale in 0.1f64..3.0) {
        let c = m.len();
        let v: Vec<f64> = m.iter().map(|x| x.abs() + 0.05).collect();
        let rm: Vec<f64> = m.iter().map(|x| x + shift).collect();
        let rv: Vec<f64> = v.iter().map(|x| x * scale).collect();
        let got = scalar(&bn_matching_loss(&[stats(&m, &v)], &[reference(0, &rm, &rv)]).unwrap());
        prop_assert_eq!(c, rm.len());
        prop_assert!((got - bn_oracle(&[(m, v, rm, rv)])).abs() <= 1e-6);
    }
}

fn base_cfg() -> RecoverConfig {
    let mut cfg = RecoverConfig::for_resolution(32, 1);
    cfg.iterations = 10;
    cfg
}

#[test]
fn init_matches_normal_moments() {
    let mut cfg = base_cfg();
    cfg.init = GaussianInit { mean: 0.5, std: 2.0 };
    // 33 images of 3×32×32 give 101 376 pixels.
    let batches = init_synthetic(33, &[0], 32, &cfg, 7).unwrap();
    let px: Vec<f32> = batches.iter().flat_map(|b| b.images().flatten_all().unwrap().to_vec1::<f32>().unwrap()).collect();
    let n = px.len() as f64;
    assert!(n >= 1e5);
    let mean = px.iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (px.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - 0.5).abs() <= 3.0 * 2.0 / n.sqrt(), "mean {mean}");
    assert!((std - 2.0).abs() <= 3.0 * 2.0 / (2.0 * n).sqrt(), "std {std}");
}

#[test]
fn init_is_deterministic_and_packs_round_robin() {
    let mut cfg = base_cfg();
    cfg.batch_size = 4;
    let a = init_synthetic(3, &[2, 0], 32, &cfg, 11).unwrap();
    let b = init_synthetic(3, &[2, 0], 32, &cfg, 11).unwrap();
    let c = init_synthetic(3, &[2, 0], 32, &cfg, 12).unwrap();
    let flat = |v: &[SyntheticBatch]| -> Vec<f32> { v.iter().flat_map(|b| b.images().flatten_all().unwrap().to_vec1::<f32>().unwrap()).collect() };
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
    assert_eq!(a.iter().map(|b| b.targets().len()).collect::<Vec<_>>(), vec![4, 2]);
    let targets: Vec<usize> = a.iter().flat_map(|b| b.targets().to_vec()).collect();
    assert_eq!(targets, vec![2, 0, 2, 0, 2, 0]);
    let slots: Vec<usize> = a.iter().flat_map(|b| b.slots().to_vec()).collect();
    assert_eq!(slots, vec![0, 3, 1, 4, 2, 5]);
}

#[test]
fn zero_std_gives_constant_image() {
    let mut cfg = base_cfg();
    cfg.init = GaussianInit { mean: -0.25, std: 0.0 };
    let b = init_synthetic(1, &[0], 32, &cfg, 0).unwrap();
    assert!(b[0].images().flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == -0.25));
}

/// A 2-class 8×8 ConvNet in f64 with non-trivial reference statistics.
fn toy8(depth: usize, dtype: DType) -> Network {
    let spec = BackboneSpec::new(ArchId::Convnet4, 8, 2).with_width(4).with_depth(depth);
    let net = Network::new(&spec, 3, dtype, ParamMode::Frozen).unwrap();
    let stats: Vec<BnLayerStats> = net
        .bn_stats()
        .unwrap()
        .into_iter()
        .map(|mut s| {
            for (c, (m, v)) in s.running_mean.iter_mut().zip(s.running_var.iter_mut()).enumerate() {
                *m = 0.1 * (c as f64 + 1.0) - 0.2;
                *v = 0.5 + 0.25 * c as f64;
            }
            s
        })
        .collect();
    net.set_bn_stats(&stats).unwrap();
    net
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let model = FrozenModel::new(toy8(2, DType::F64)).unwrap();
    let mut cfg = base_cfg();
    cfg.alpha_bn = 1.0;
    cfg.alpha_tv = 0.05;
    cfg.alpha_l2 = 0.02;
    let crops = [CropRect { top: 1, left: 2, height: 6, width: 5 }];
    let x0 = wiggle(3 * 8 * 8, 0.4);
    let var = Var::from_tensor(&t(x0.clone(), &[1, 3, 8, 8])).unwrap();
    let (total, _) = recovery_loss(&model, var.as_tensor(), &[0], &crops, &cfg).unwrap();
    let grads = total.backward().unwrap();
    let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let eval = |v: Vec<f64>| recovery_loss(&model, &t(v, &[1, 3, 8, 8]), &[0], &crops, &cfg).unwrap().1.total;
    let eps = 1e-6;
    let mut checked = 0;
    for (ch, y, x) in [(0, 1, 2), (0, 3, 4), (1, 4, 3), (1, 6, 6), (2, 2, 5), (2, 5, 2)] {
        let i = ch * 64 + y * 8 + x;
        let (mut up, mut down) = (x0.clone(), x0.clone());
        up[i] += eps;
        down[i] -= eps;
        let fd = (eval(up) - eval(down)) / (2.0 * eps);
        let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8);
        assert!(rel <= 1e-3, "pixel {i}: analytic {} vs fd {fd} (rel {rel})", g[i]);
        checked += 1;
    }
    assert_eq!(checked, 6);
    // Pixels outside the crop do not reach the loss.
    assert_eq!(g[0], 0.0);
}

#[test]
fn matched_statistics_are_a_fixed_point() {
    let net = toy8(1, DType::F64);
    let x = t(wiggle(4 * 3 * 8 * 8, 2.0), &[4, 3, 8, 8]);
    let mut pass = Pass::eval_capturing();
    net.forward(&x, &mut pass).unwrap();
    let captured: Vec<BnLayerStats> = pass
        .take_stats()
        .iter()
        .enumerate()
        .map(|(i, s)| reference(i, &s.mean.to_vec1::<f64>().unwrap(), &s.var.to_vec1::<f64>().unwrap()))
        .collect();
    assert_eq!(captured.len(), 1);
    net.set_bn_stats(&captured).unwrap();
    let model = FrozenModel::new(net).unwrap();
    let mut cfg = base_cfg();
    cfg.alpha_ce = 0.0;
    cfg.alpha_bn = 1.0;
    let crops = vec![CropRect::full(8, 8); 4];
    let (_, br) = recovery_loss(&model, &x, &[0, 1, 0, 1], &crops, &cfg).unwrap();
    assert!(br.r_bn <= 1e-6, "r_bn {}", br.r_bn);
    assert!(br.total.abs() <= 1e-6);
}

fn toy_batch(b: usize, phase: f64) -> SyntheticBatch {
    SyntheticBatch::from_tensor(t(wiggle(b * 3 * 64, phase), &[b, 3, 8, 8]).to_dtype(DType::F32).unwrap(), (0..b).map(|i| i % 2).collect()).unwrap()
}

#[test]
fn steps_only_touch_the_crop_and_keep_the_model_frozen() {
    let model = FrozenModel::new(toy8(2, DType::F32)).unwrap();
    let before = model.network().bn_stats().unwrap();
    let mut cfg = base_cfg();
    cfg.iterations = 100;
    cfg.alpha_tv = 0.01;
    let mut batch = toy_batch(3, 0.9);
    let mut rng = seed::stream(5, &[0]);
    for _ in 0..100 {
        let prev: Vec<f32> = batch.images().flatten_all().unwrap().to_vec1().unwrap();
        let br = recover_step(&mut batch, &model, &cfg, &mut rng).unwrap();
        assert_eq!(br, RecoveryLossBreakdown::compose(&cfg, br.ce, br.r_bn, br.r_tv, br.r_l2));
        let next: Vec<f32> = batch.images().flatten_all().unwrap().to_vec1().unwrap();
        for (i, crop) in batch.last_crops().iter().enumerate() {
            for ch in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        let k = ((i * 3 + ch) * 8 + y) * 8 + x;
                        if !crop.contains(y, x) {
                            assert_eq!(prev[k].to_bits(), next[k].to_bits());
                        }
                    }
                }
            }
        }
        assert!(next.iter().all(|v| v.is_finite()));
    }
    assert_eq!(batch.iteration, 100);
    assert_eq!(model.network().bn_stats().unwrap(), before);
}

#[test]
fn total_recomposes_without_priors() {
    let model = FrozenModel::new(toy8(2, DType::F32)).unwrap();
    let cfg = base_cfg();
    let mut batch = toy_batch(2, 0.1);
    let br = recover_step(&mut batch, &model, &cfg, &mut seed::stream(1, &[])).unwrap();
    assert_eq!(br.total, br.ce + cfg.alpha_bn * br.r_bn);
}

#[test]
fn clamp_bounds_the_updated_region() {
    let model = FrozenModel::new(toy8(2, DType::F32)).unwrap();
    let mut cfg = base_cfg();
    cfg.clamp = Some(Clamp::Range { min: -0.5, max: 0.5 });
    cfg.lr = 5.0;
    let mut batch = toy_batch(2, 3.3);
    recover_step(&mut batch, &model, &cfg, &mut seed::stream(2, &[])).unwrap();
    let px: Vec<f32> = batch.images().flatten_all().unwrap().to_vec1().unwrap();
    for (i, crop) in batch.last_crops().iter().enumerate() {
        for ch in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    if crop.contains(y, x) {
                        let v = px[((i * 3 + ch) * 8 + y) * 8 + x];
                        assert!((-0.5..=0.5).contains(&v), "{v}");
                    }
                }
            }
        }
    }
}

#[test]
fn recovery_is_deterministic() {
    let ckpt = toy8(2, DType::F32).to_checkpoint(CheckpointMeta::default()).unwrap();
    let mut cfg = base_cfg();
    cfg.ipc = 2;
    cfg.iterations = 5;
    cfg.batch_size = 3;
    let a = recover(&ckpt, &cfg, &[1, 0]).unwrap();
    let b = recover(&ckpt, &cfg, &[1, 0]).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(a.images, b.images);
    assert_eq!(a.hard_labels, vec![1, 1, 0, 0]);
    assert_eq!(a.provenance.iterations, 5);
}

#[test]
fn loss_falls_over_ten_iterations_on_most_seeds() {
    let ckpt = common::teacher();
    let mut falls = 0;
    for s in 0..10 {
        let mut cfg = RecoverConfig::for_resolution(32, 1);
        cfg.iterations = 10;
        cfg.seed = s;
        let rep = recover_report(ckpt, &cfg, &[0], None).unwrap();
        if rep.losses[9].total < rep.losses[0].total {
            falls += 1;
        }
    }
    assert!(falls >= 8, "loss fell on only {falls} of 10 seeds");
}

#[test]
fn divergence_reports_and_saves_partial_images() {
    let ckpt = toy8(2, DType::F32).to_checkpoint(CheckpointMeta::default()).unwrap();
    let mut cfg = base_cfg();
    cfg.init = GaussianInit { mean: 1e38, std: 1.0 };
    let dir = tempfile::tempdir().unwrap();
    let err = recover_report(&ckpt, &cfg, &[0], Some(dir.path())).unwrap_err();
    match err {
        Error::Divergence { stage, step, detail } => {
            assert_eq!(stage, "recover");
            assert_eq!(step, 0);
            assert!(detail.contains("last finite step"));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    let partial = load_condensed(dir.path()).unwrap();
    assert_eq!(partial.len(), 1);
    assert_eq!(partial.provenance.iterations, 0);
}

#[test]
fn invalid_configs_are_rejected() {
    let ckpt = toy8(2, DType::F32).to_checkpoint(CheckpointMeta::default()).unwrap();
    let mut cfg = base_cfg();
    assert!(matches!(recover(&ckpt, &cfg, &[2]), Err(Error::Config(_))));
    assert!(matches!(recover(&ckpt, &cfg, &[0, 0]), Err(Error::Config(_))));
    cfg.iterations = 0;
    assert!(matches!(recover(&ckpt, &cfg, &[0]), Err(Error::Config(_))));
    let mut cfg = base_cfg();
    cfg.alpha_bn = -1.0;
    assert!(cfg.validate().is_err());
    let mut cfg = base_cfg();
    cfg.crop.scale = (0.5, 0.2);
    assert!(cfg.validate().is_err());
}
