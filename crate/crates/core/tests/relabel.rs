mod common;

use condense::augment::CropParams;
use condense::relabel::{
    archive_from_bytes, archive_to_bytes, generate_crop_plan, load_archive, relabel, save_archive, tempered_softmax, ArchiveMeta,
    CropLabelArchive, CropRecord, LabelPrecision, RelabelConfig, SoftLabel,
};
use condense::Error;
use proptest::prelude::*;

fn cfg(tau: f64, epochs: usize, precision: LabelPrecision) -> RelabelConfig {
    RelabelConfig {
        temperature: tau,
        epochs,
        crop: CropParams::default(),
        precision,
        seed: 3,
    }
}

#[test]
fn softmax_of_two_logits() {
    let p = tempered_softmax(&[2.0, 0.0], 2.0);
    let e = std::f64::consts::E;
    assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
}

#[test]
fn huge_temperature_gives_uniform_labels() {
    let cd = common::toy_condensed(2);
    let archive = relabel(&cd, common::teacher(), &cfg(1e6, 3, LabelPrecision::DenseF32)).unwrap();
    let uniform = 1.0 / common::CLASSES as f64;
    for r in archive.records.iter().flatten() {
        assert!(r.soft_label.probs().iter().all(|p| (p - uniform).abs() <= 1e-4));
    }
}

#[test]
fn labels_sum_to_one_and_argmax_ignores_temperature() {
    let cd = common::toy_condensed(3);
    let archives: Vec<CropLabelArchive> = [1.0, 5.0, 10.0, 15.0, 20.0]
        .iter()
        .map(|&tau| relabel(&cd, common::teacher(), &cfg(tau, 4, LabelPrecision::DenseF32)).unwrap())
        .collect();
    for a in &archives {
        for r in a.records.iter().flatten() {
            let SoftLabel::Dense32(raw) = &r.soft_label else { panic!("expected dense f32") };
            let sum: f64 = raw.iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() <= 1e-6, "sum {sum}");
            assert!(raw.iter().all(|&v| v >= 0.0));
            // KL to uniform is finite when every entry is positive.
            let kl: f64 = raw.iter().map(|&v| v as f64 * (v as f64 * raw.len() as f64).ln()).sum();
            assert!(kl.is_finite());
        }
    }
    for i in 0..cd.len() {
        for e in 0..4 {
            let first = archives[0].records[i][e].soft_label.argmax();
            assert!(archives.iter().all(|a| a.records[i][e].soft_label.argmax() == first));
        }
    }
}

#[test]
fn records_follow_the_crop_plan() {
    let cd = common::toy_condensed(2);
    let c = cfg(20.0, 5, LabelPrecision::DenseF16);
    let archive = relabel(&cd, common::teacher(), &c).unwrap();
    let plan = archive.plan();
    assert_eq!(archive.records.len(), cd.len());
    for (i, recs) in archive.records.iter().enumerate() {
        assert_eq!(recs.len(), 5);
        for (e, r) in recs.iter().enumerate() {
            assert_eq!(r.epoch, e);
            assert_eq!((r.rect, r.hflip), plan.draw(i, e));
        }
    }
    assert_eq!(archive.meta.images_sha256, cd.checksum());
    assert_eq!(archive.meta.teacher_id, common::teacher().id().unwrap());
}

#[test]
fn relabel_is_reproducible_bitwise() {
    let cd = common::toy_condensed(2);
    let c = cfg(20.0, 3, LabelPrecision::DenseF16);
    let a = archive_to_bytes(&relabel(&cd, common::teacher(), &c).unwrap()).unwrap();
    let b = archive_to_bytes(&relabel(&cd, common::teacher(), &c).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn archives_round_trip_at_every_precision() {
    let cd = common::toy_condensed(2);
    let dir = tempfile::tempdir().unwrap();
    for precision in [LabelPrecision::DenseF32, LabelPrecision::DenseF16, LabelPrecision::TopK { k: 2 }] {
        let archive = relabel(&cd, common::teacher(), &cfg(20.0, 3, precision)).unwrap();
        let path = dir.path().join("labels.srl");
        let bytes = save_archive(&archive, &path).unwrap();
        assert_eq!(bytes, std::fs::metadata(&path).unwrap().len());
        let back = load_archive(&path).unwrap();
        assert_eq!(back, archive);
        for r in back.records.iter().flatten() {
            assert!((r.soft_label.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn resolution_and_class_mismatch_are_rejected() {
    let mut cd = common::toy_condensed(1);
    cd.num_classes = common::CLASSES + 1;
    assert!(matches!(relabel(&cd, common::teacher(), &cfg(20.0, 1, LabelPrecision::DenseF16)), Err(Error::Config(_))));
    let mut cd = common::toy_condensed(1);
    cd.resolution = 16;
    cd.images.truncate(cd.len() * 3 * 16 * 16);
    assert!(relabel(&cd, common::teacher(), &cfg(20.0, 1, LabelPrecision::DenseF16)).is_err());
    assert!(cfg(0.0, 1, LabelPrecision::DenseF16).validate().is_err());
    assert!(cfg(1.0, 0, LabelPrecision::DenseF16).validate().is_err());
}

/// A synthetic archive over `k` classes with peaked labels.
fn synthetic_archive(k: usize, images: usize, epochs: usize, precision: LabelPrecision) -> CropLabelArchive {
    let plan = generate_crop_plan(images, epochs, CropParams::default(), 32, 9).unwrap();
    let records = (0..images)
        .map(|i| {
            (0..epochs)
                .map(|e| {
                    let logits: Vec<f64> = (0..k).map(|c| ((c * 31 + i * 7 + e) % 17) as f64 * 0.5).collect();
                    let (rect, hflip) = plan.draw(i, e);
                    CropRecord {
                        epoch: e,
                        rect,
                        hflip,
                        soft_label: SoftLabel::encode(&tempered_softmax(&logits, 1.0), precision),
                    }
                })
                .collect()
        })
        .collect();
    CropLabelArchive {
        meta: ArchiveMeta {
            teacher_id: "t".into(),
            images_sha256: "s".into(),
            temperature: 1.0,
            epochs,
            crop: CropParams::default(),
            precision,
            seed: 9,
            num_images: images,
            num_classes: k,
            resolution: 32,
        },
        records,
    }
}

#[test]
fn full_precision_archives_are_larger_than_top_k() {
    let k = 100;
    let size = |p| archive_to_bytes(&synthetic_archive(k, 4, 3, p)).unwrap();
    let (full, half, top) = (size(LabelPrecision::DenseF32), size(LabelPrecision::DenseF16), size(LabelPrecision::TopK { k: 10 }));
    assert!(full.len() > half.len() && half.len() > top.len());
    // Each of the 12 records stores 21 bytes of geometry plus its label.
    let header = |b: &[u8]| u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
    let records = |b: &[u8]| b.len() - 20 - header(b) - 32;
    assert_eq!(records(&full), 12 * (21 + 4 * k));
    assert_eq!(records(&half), 12 * (21 + 2 * k));
    assert_eq!(records(&top), 12 * (21 + 8 * 10));
}

#[test]
fn top_k_reconstructs_a_distribution() {
    let archive = synthetic_archive(100, 2, 2, LabelPrecision::TopK { k: 10 });
    for r in archive.records.iter().flatten() {
        let p = r.soft_label.probs();
        assert_eq!(p.len(), 100);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        assert!(p.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn damaged_archives_are_detected() {
    let bytes = archive_to_bytes(&synthetic_archive(5, 2, 2, LabelPrecision::DenseF16)).unwrap();
    assert!(matches!(archive_from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corrupt { .. })));
    let mut flipped = bytes.clone();
    flipped[40] ^= 0x10;
    assert!(matches!(archive_from_bytes(&flipped), Err(Error::Corrupt { .. })));
    let mut versioned = bytes.clone();
    versioned[8] = 99;
    assert!(matches!(archive_from_bytes(&versioned), Err(Error::Version { .. })));
    assert!(matches!(archive_from_bytes(b"nonsense"), Err(Error::Corrupt { .. })));
}

#[test]
fn malformed_records_fail_validation() {
    let mut a = synthetic_archive(5, 2, 2, LabelPrecision::DenseF32);
    a.records[1].pop();
    assert!(matches!(a.validate(), Err(Error::Integrity(_))));
    let mut a = synthetic_archive(5, 2, 2, LabelPrecision::DenseF32);
    a.records[0][1].rect.top = 40;
    assert!(matches!(archive_to_bytes(&a), Err(Error::Integrity(_))));
}

#[test]
fn crop_plan_is_pure_and_in_bounds() {
    let params = CropParams {
        scale: (0.25, 0.5),
        ratio: (0.75, 4.0 / 3.0),
    };
    let a = generate_crop_plan(10, 100, params, 32, 4).unwrap();
    let b = generate_crop_plan(500, 3, params, 32, 4).unwrap();
    let area = 32.0 * 32.0;
    for i in 0..10 {
        for e in 0..100 {
            let (rect, flip) = a.draw(i, e);
            if e < 3 {
                assert_eq!((rect, flip), b.draw(i, e));
            }
            assert!(rect.fits(32, 32));
            // Rounding each side moves the area by at most half of each side plus a quarter.
            let slack = 0.5 * (rect.width + rect.height + 1) as f64 + 0.25;
            let got = (rect.width * rect.height) as f64;
            assert!(got >= 0.25 * area - slack && got <= 0.5 * area + slack, "{rect:?}");
        }
    }
    assert_ne!(a.draw(0, 0), generate_crop_plan(10, 100, params, 32, 5).unwrap().draw(0, 0));
    assert!(generate_crop_plan(1, 1, CropParams { scale: (0.0, 1.0), ..params }, 32, 0).is_err());
}

#[test]
fn precision_names_parse() {
    assert_eq!("f32".parse::<LabelPrecision>().unwrap(), LabelPrecision::DenseF32);
    assert_eq!("top10".parse::<LabelPrecision>().unwrap(), LabelPrecision::TopK { k: 10 });
    assert!("bf16".parse::<LabelPrecision>().is_err());
}

proptest! {
    #[test]
    fn tempered_softmax_sums_to_one_and_keeps_order(logits in prop::collection::vec(-20.0f64..20.0, 2..12), tau in 0.05f64..100.0) {
        let p = tempered_softmax(&logits, tau);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for i in 0..logits.len() {
            for j in 0..logits.len() {
                if logits[i] > logits[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn top_k_encoding_is_a_distribution(logits in prop::collection::vec(-5.0f64..5.0, 3..40), k in 1usize..10) {
        let label = SoftLabel::encode(&tempered_softmax(&logits, 1.0), LabelPrecision::TopK { k });
        let p = label.probs();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn plan_draws_always_fit(seed in any::<u64>(), i in 0usize..1000, e in 0usize..1000, res in 2usize..64) {
        let plan = generate_crop_plan(1000, 1000, CropParams::default(), res, seed).unwrap();
        prop_assert!(plan.draw(i, e).0.fits(res, res));
    }
}
