mod common;

use candle_core::{Device, Tensor};
use condense::analysis::{
    emit_report, extract_embeddings, generalization_bound_icb, generalization_bound_icb_with, load_embeddings, mutual_info_upper_bound,
    nats_to_bits, save_embeddings, save_embeddings_tsv, IcbBases,
};
use condense::Error;
use proptest::prelude::*;

fn loo_oracle(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut off = 0.0;
        for j in 0..n {
            if j != i {
                off += m[i][j];
            }
        }
        total += (m[i][i] * (n - 1) as f64 / off).ln();
    }
    total / n as f64
}

#[test]
fn mi_hand_cases() {
    let v = mutual_info_upper_bound(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
    assert!((v - 9f64.ln()).abs() <= 1e-6);
    assert!((v - 2.1972).abs() <= 1e-4);
    let constant = vec![vec![0.3; 4]; 4];
    assert_eq!(mutual_info_upper_bound(&constant).unwrap(), 0.0);
}

#[test]
fn mi_three_samples_match_direct_summation() {
    let m = vec![vec![0.7, 0.2, 0.05], vec![0.13, 0.61, 0.3], vec![0.02, 0.4, 0.9]];
    assert!((mutual_info_upper_bound(&m).unwrap() - loo_oracle(&m)).abs() <= 1e-9);
}

#[test]
fn mi_domain_errors() {
    assert!(matches!(mutual_info_upper_bound(&[vec![1.0]]), Err(Error::Domain(_))));
    assert!(matches!(mutual_info_upper_bound(&[vec![0.5, 0.0], vec![0.2, 0.3]]), Err(Error::Domain(_))));
    assert!(matches!(mutual_info_upper_bound(&[vec![0.5, -0.1], vec![0.2, 0.3]]), Err(Error::Domain(_))));
    assert!(matches!(mutual_info_upper_bound(&[vec![0.5, 0.1], vec![0.2]]), Err(Error::Domain(_))));
}

#[test]
fn nats_convert_to_bits() {
    assert!((nats_to_bits(std::f64::consts::LN_2) - 1.0).abs() < 1e-15);
    assert!((nats_to_bits(9f64.ln()) - 9f64.log2()).abs() < 1e-12);
}

#[test]
fn icb_hand_cases() {
    assert!((generalization_bound_icb(0.0, 1.0, 50).unwrap() - 0.1).abs() <= 1e-6);
    let want = ((8.0 + 20f64.ln()) / 1000.0).sqrt();
    let got = generalization_bound_icb(3.0, 0.05, 500).unwrap();
    assert!((got - want).abs() <= 1e-6);
    assert!((got - 0.10486).abs() <= 1e-5);
    // Natural exponent and base-2 confidence term, spelled out.
    let alt = generalization_bound_icb_with(1.0, 0.5, 10, IcbBases { exponent: std::f64::consts::E, log: 2.0 }).unwrap();
    assert!((alt - ((std::f64::consts::E + 1.0) / 20.0).sqrt()).abs() <= 1e-12);
}

#[test]
fn icb_domain_errors() {
    assert!(matches!(generalization_bound_icb(0.0, 1.0, 0), Err(Error::Domain(_))));
    assert!(matches!(generalization_bound_icb(0.0, 0.0, 5), Err(Error::Domain(_))));
    assert!(matches!(generalization_bound_icb(0.0, 1.5, 5), Err(Error::Domain(_))));
    assert!(matches!(generalization_bound_icb(f64::NAN, 0.5, 5), Err(Error::Domain(_))));
}

proptest! {
    #[test]
    fn mi_matches_oracle(n in 2usize..6, seed in 0u64..10_000) {
        let m: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| (((i * 31 + j * 17) as u64 * 2654435761 + seed) % 997) as f64 / 997.0 + 0.01).collect())
            .collect();
        prop_assert!((mutual_info_upper_bound(&m).unwrap() - loo_oracle(&m)).abs() <= 1e-9);
    }

    #[test]
    fn mi_ignores_row_scaling(n in 2usize..6, scale in 0.01f64..100.0, row in 0usize..6) {
        let m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| 0.1 + ((i + 2 * j) % 5) as f64 * 0.2).collect()).collect();
        let mut scaled = m.clone();
        scaled[row % n].iter_mut().for_each(|v| *v *= scale);
        prop_assert!((mutual_info_upper_bound(&m).unwrap() - mutual_info_upper_bound(&scaled).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn icb_is_monotone(i in 0.0f64..10.0, di in 0.01f64..3.0, delta in 0.01f64..1.0, n in 1usize..10_000) {
        let base = generalization_bound_icb(i, delta, n).unwrap();
        prop_assert!(generalization_bound_icb(i + di, delta, n).unwrap() > base);
        prop_assert!(generalization_bound_icb(i, delta / 2.0, n).unwrap() > base);
        prop_assert!(generalization_bound_icb(i, delta, n + 1).unwrap() < base);
    }
}

fn images(values: &[f32]) -> Tensor {
    let n = 3 * 32 * 32;
    let data: Vec<f32> = values.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
    Tensor::from_vec(data, (values.len(), 3, 32, 32), &Device::Cpu).unwrap()
}

#[test]
fn embeddings_have_one_row_per_image() {
    let emb = extract_embeddings(common::teacher(), &images(&[0.0, 1.0, 0.0, -0.5, 1.0])).unwrap();
    assert_eq!(emb.rows, 5);
    assert_eq!(emb.data.len(), 5 * emb.dim);
    assert_eq!(emb.row(0), emb.row(2));
    assert_eq!(emb.row(1), emb.row(4));
    assert_ne!(emb.row(0), emb.row(1));
    assert_eq!(emb.checkpoint_id, common::teacher().id().unwrap());
}

#[test]
fn embeddings_follow_input_order() {
    let ds = common::toy_val();
    let all = extract_embeddings(common::teacher(), &ds.batch(&[0, 5, 9]).unwrap()).unwrap();
    let one = extract_embeddings(common::teacher(), &ds.batch(&[9]).unwrap()).unwrap();
    for (a, b) in all.row(2).iter().zip(one.row(0)) {
        assert!((a - b).abs() <= 1e-5);
    }
}

#[test]
fn embedding_files_round_trip() {
    let emb = extract_embeddings(common::teacher(), &images(&[0.2, -0.7])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    save_embeddings(&emb, &path).unwrap();
    assert_eq!(load_embeddings(&path).unwrap(), emb);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_embeddings(&path), Err(Error::Corrupt { .. })));
    let tsv = dir.path().join("emb.tsv");
    save_embeddings_tsv(&emb, &tsv).unwrap();
    let text = std::fs::read_to_string(tsv).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(text.lines().next().unwrap().split('\t').count(), emb.dim);
}

#[test]
fn report_merges_inputs_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("losses.csv");
    let b = dir.path().join("history.csv");
    std::fs::write(&a, "iter,total\n0,2.5\n1,1.5\n").unwrap();
    std::fs::write(&b, "epoch,train_loss,val_top1\n0,1.0,\n").unwrap();
    let inputs = vec![("recover".to_string(), a), ("eval".to_string(), b)];
    let out = dir.path().join("report");
    let first = emit_report(&inputs, &out).unwrap();
    let table = std::fs::read(&first.table).unwrap();
    let manifest = std::fs::read(&first.manifest).unwrap();
    let second = emit_report(&inputs, &out).unwrap();
    assert_eq!(std::fs::read(&second.table).unwrap(), table);
    assert_eq!(std::fs::read(&second.manifest).unwrap(), manifest);
    let text = String::from_utf8(table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "source,row,column,value");
    assert_eq!(lines.len(), 1 + 4 + 3);
    assert!(lines.contains(&"recover,1,total,1.5"));
    assert!(lines.contains(&"eval,0,val_top1,"));
    let json: serde_json::Value = serde_json::from_slice(&manifest).unwrap();
    assert_eq!(json["sources"].as_array().unwrap().len(), 2);
    assert_eq!(json["sources"][0]["rows"], 2);
}

#[test]
fn report_missing_input_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = vec![("gone".to_string(), dir.path().join("nope.csv"))];
    assert!(matches!(emit_report(&inputs, dir.path().join("r")), Err(Error::Io { .. })));
    assert!(!dir.path().join("r").exists());
    let a = dir.path().join("a.csv");
    std::fs::write(&a, "x\n1\n").unwrap();
    let twice = vec![("s".to_string(), a.clone()), ("s".to_string(), a)];
    assert!(matches!(emit_report(&twice, dir.path().join("r")), Err(Error::Config(_))));
}
