mod common;

use candle_core::{DType, Device, Tensor};
use condense::augment::crop_resize;
use condense::data::CondensedDataset;
use condense::evaluate::{gaussian_noise_like, kd_loss, train_student, write_history_csv, EvalConfig, TargetMode};
use condense::model_zoo::Network;
use condense::nn::{ParamMode, Pass};
use condense::relabel::{relabel, CropLabelArchive, LabelPrecision, RelabelConfig, SoftLabel};
use condense::train::cross_entropy;
use condense::Error;
use proptest::prelude::*;

fn scalar(x: &Tensor) -> f64 {
    x.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn row(v: &[f64]) -> Tensor {
    Tensor::new(v, &Device::Cpu).unwrap()
}

fn kd_oracle(logits: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let per_row: Vec<f64> = logits
        .iter()
        .zip(targets)
        .map(|(z, t)| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            -z.iter().zip(t).map(|(zi, ti)| ti * (zi - lse)).sum::<f64>()
        })
        .collect();
    per_row.iter().sum::<f64>() / per_row.len() as f64
}

#[test]
fn kd_hand_cases() {
    let two = scalar(&kd_loss(&row(&[0.3, 0.3]), &row(&[0.5, 0.5])).unwrap());
    assert!((two - std::f64::consts::LN_2).abs() <= 1e-6);
    let k = 7;
    let uniform = scalar(&kd_loss(&row(&vec![1.25; k]), &row(&vec![1.0 / k as f64; k])).unwrap());
    assert!((uniform - (k as f64).ln()).abs() <= 1e-6);
    // Uniform targets against any student: the mean negative log-probability.
    let z = [2.0, -1.0, 0.5];
    let direct = kd_oracle(&[z.to_vec()], &[vec![1.0 / 3.0; 3]]);
    assert!((scalar(&kd_loss(&row(&z), &row(&[1.0 / 3.0; 3])).unwrap()) - direct).abs() <= 1e-6);
}

#[test]
fn kd_with_one_hot_targets_is_cross_entropy() {
    let logits = Tensor::new(&[[1.0f64, -0.5, 2.0], [0.1, 0.2, -0.3]], &Device::Cpu).unwrap();
    let targets = Tensor::new(&[[0.0f64, 0.0, 1.0], [1.0, 0.0, 0.0]], &Device::Cpu).unwrap();
    let kd = scalar(&kd_loss(&logits, &targets).unwrap());
    let ce = scalar(&cross_entropy(&logits, &[2, 0]).unwrap());
    assert!((kd - ce).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn kd_matches_brute_force(rows in 1usize..=4, cols in 2usize..=4, seed in 0u64..1000) {
        let val = |i: usize| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64) / 250.0 - 2.0;
        let logits: Vec<Vec<f64>> = (0..rows).map(|r| (0..cols).map(|c| val(r * cols + c)).collect()).collect();
        let targets: Vec<Vec<f64>> = (0..rows)
            .map(|r| {
                let raw: Vec<f64> = (0..cols).map(|c| val(100 + r * cols + c).abs() + 0.01).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let lt = Tensor::new(logits.clone(), &Device::Cpu).unwrap();
        let tt = Tensor::new(targets.clone(), &Device::Cpu).unwrap();
        prop_assert!((scalar(&kd_loss(&lt, &tt).unwrap()) - kd_oracle(&logits, &targets)).abs() <= 1e-6);
    }
}

fn eval_cfg(epochs: usize) -> EvalConfig {
    let mut cfg = EvalConfig::for_resolution(common::small_spec());
    cfg.epochs = epochs;
    cfg.batch_size = 8;
    cfg
}

fn archive_for(cd: &CondensedDataset, epochs: usize, tau: f64) -> CropLabelArchive {
    let cfg = RelabelConfig {
        temperature: tau,
        precision: LabelPrecision::DenseF32,
        ..RelabelConfig::for_resolution(32, epochs)
    };
    relabel(cd, common::teacher(), &cfg).unwrap()
}

#[test]
fn single_image_with_one_hot_labels_is_memorised() {
    let full = common::toy_condensed(1);
    let n = full.image_len();
    let class = 2;
    let cd = CondensedDataset {
        ipc: 1,
        class_ids: vec![class],
        images: full.image(class).to_vec(),
        hard_labels: vec![class],
        ..full.clone()
    };
    assert_eq!(cd.images.len(), n);
    let mut archive = archive_for(&cd, 50, 20.0);
    for r in archive.records.iter_mut().flatten() {
        let mut p = vec![0.0f32; common::CLASSES];
        p[class] = 1.0;
        r.soft_label = SoftLabel::Dense32(p);
    }
    let report = train_student(&cd, &archive, &eval_cfg(50), None).unwrap();
    let net = Network::from_checkpoint(&report.checkpoint, ParamMode::Frozen).unwrap();
    let last = &archive.records[0][49];
    let x = crop_resize(&cd.batch(&[0]).unwrap(), &[last.rect], &[last.hflip], 32).unwrap();
    let logits: Vec<f32> = net.forward(&x, &mut Pass::eval()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let pred = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
    assert_eq!(pred, class);
    assert!(report.step_losses.last().unwrap() < &report.step_losses[0]);
}

#[test]
fn student_training_is_deterministic() {
    let cd = common::toy_condensed(2);
    let archive = archive_for(&cd, 4, 20.0);
    let mut cfg = eval_cfg(4);
    cfg.eval_every = 2;
    let val = common::toy_val();
    let a = train_student(&cd, &archive, &cfg, Some(&val)).unwrap();
    let b = train_student(&cd, &archive, &cfg, Some(&val)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.checkpoint, b.checkpoint);
    let evaluated: Vec<bool> = a.history.iter().map(|h| h.val_top1.is_some()).collect();
    assert_eq!(evaluated, vec![false, true, false, true]);
    assert_eq!(a.final_top1, a.history[3].val_top1);
}

#[test]
fn near_zero_temperature_matches_hard_label_training() {
    let cd = common::toy_condensed(2);
    let archive = archive_for(&cd, 3, 1e-12);
    let mut soft = eval_cfg(3);
    soft.targets = TargetMode::Soft;
    let mut hard = soft.clone();
    hard.targets = TargetMode::ArchiveArgmax;
    let a = train_student(&cd, &archive, &soft, None).unwrap();
    let b = train_student(&cd, &archive, &hard, None).unwrap();
    assert_eq!(a.step_losses.len(), b.step_losses.len());
    for (x, y) in a.step_losses.iter().zip(&b.step_losses) {
        assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
    }
}

#[test]
fn cutmix_training_stays_finite() {
    let cd = common::toy_condensed(2);
    let archive = archive_for(&cd, 3, 20.0);
    let mut cfg = eval_cfg(3);
    cfg.cutmix.enabled = true;
    let r = train_student(&cd, &archive, &cfg, None).unwrap();
    assert!(r.step_losses.iter().all(|v| v.is_finite()));
    cfg.targets = TargetMode::HardLabels;
    let r = train_student(&cd, &archive, &cfg, None).unwrap();
    assert!(r.step_losses.iter().all(|v| v.is_finite()));
}

#[test]
fn pairing_errors() {
    let cd = common::toy_condensed(2);
    let archive = archive_for(&cd, 3, 20.0);
    assert!(matches!(train_student(&cd, &archive, &eval_cfg(4), None), Err(Error::Config(_))));
    let noise = gaussian_noise_like(&cd, 0);
    assert!(matches!(train_student(&noise, &archive, &eval_cfg(3), None), Err(Error::Integrity(_))));
    let fewer = common::toy_condensed(1);
    assert!(matches!(train_student(&fewer, &archive, &eval_cfg(3), None), Err(Error::Structural(_))));
    let mut wrong_student = eval_cfg(3);
    wrong_student.student.num_classes = 5;
    assert!(matches!(train_student(&cd, &archive, &wrong_student, None), Err(Error::Config(_))));
}

#[test]
fn noise_control_keeps_layout() {
    let cd = common::toy_condensed(2);
    let noise = gaussian_noise_like(&cd, 4);
    assert_eq!(noise.images.len(), cd.images.len());
    assert_eq!(noise.hard_labels, cd.hard_labels);
    assert_ne!(noise.checksum(), cd.checksum());
    assert_eq!(noise.images, gaussian_noise_like(&cd, 4).images);
}

#[test]
fn history_csv_has_expected_columns() {
    let cd = common::toy_condensed(1);
    let archive = archive_for(&cd, 2, 20.0);
    let val = common::toy_val();
    let mut cfg = eval_cfg(2);
    cfg.eval_every = 2;
    let r = train_student(&cd, &archive, &cfg, Some(&val)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    write_history_csv(&path, &r.history).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_top1");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].ends_with(','));
    let last: Vec<&str> = lines[2].split(',').collect();
    let acc: f64 = last[2].parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}
