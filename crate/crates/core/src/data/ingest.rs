//! Loading from class-folder PNG trees and the CIFAR binary layouts.
//!
//! Folder trees are read from `<root>/<split>/<class>/*` when a split
//! directory exists and from `<root>/<class>/*` otherwise. Class indices
//! follow the sorted directory names; files are read in sorted name order.
//!
//! CIFAR-10 binaries: `data_batch_{1..5}.bin` (train) and `test_batch.bin`
//! (val), records of 1 label byte + 3072 pixel bytes. CIFAR-100 binaries:
//! `train.bin` / `test.bin`, records of coarse label, fine label, 3072 pixel
//! bytes; the fine label is used.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{normalization_for, LabeledDataset, Normalization, Split, CHANNELS};
use crate::error::{Error, IoContext, Result};

/// Load a labeled split from `root`, normalized with the constants
/// registered under `name`.
pub fn load_dataset(root: impl AsRef<Path>, name: &str, split: Split) -> Result<LabeledDataset> {
    let root = root.as_ref();
    let norm = normalization_for(name)?;
    if let Some(ds) = load_cifar_binary(root, name, split, &norm)? {
        return Ok(ds);
    }
    let split_dir = root.join(split.as_str());
    let dir = if split_dir.is_dir() {
        split_dir
    } else if split == Split::Val && root.join("test").is_dir() {
        root.join("test")
    } else {
        root.to_path_buf()
    };
    load_folder(&dir, name, split, norm)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).at(dir)? {
        let e = e.at(dir)?;
        if e.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        out.push(e.path());
    }
    out.sort();
    Ok(out)
}

fn load_folder(dir: &Path, name: &str, split: Split, normalization: Normalization) -> Result<LabeledDataset> {
    let classes: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::Ingest {
            offenders: vec![format!("{}: no class directories", dir.display())],
        });
    }
    let mut offenders = Vec::new();
    let mut resolution = None;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        let class_name = class_dir.file_name().expect("entry has a name").to_string_lossy().into_owned();
        let files: Vec<PathBuf> = sorted_entries(class_dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            offenders.push(format!("class `{class_name}` has no images"));
        }
        for f in files {
            let img = match image::open(&f) {
                Ok(img) => img.to_rgb8(),
                Err(e) => {
                    offenders.push(format!("{}: {e}", f.display()));
                    continue;
                }
            };
            let (w, h) = img.dimensions();
            let res = *resolution.get_or_insert(w as usize);
            if w != h || w as usize != res {
                offenders.push(format!("{}: {w}×{h}, expected {res}×{res}", f.display()));
                continue;
            }
            push_rgb(&mut images, img.as_raw(), res, &normalization, true);
            labels.push(label);
        }
        class_names.push(class_name);
    }
    if !offenders.is_empty() {
        return Err(Error::Ingest { offenders });
    }
    let ds = LabeledDataset {
        name: name.to_string(),
        split,
        resolution: resolution.expect("at least one image"),
        num_classes: class_names.len(),
        class_names,
        normalization,
        images,
        labels,
    };
    ds.validate()?;
    Ok(ds)
}

/// Append one image given as 8-bit RGB, either interleaved (`HWC`) or
/// planar (`CHW`), converting to normalized planar floats.
fn push_rgb(out: &mut Vec<f32>, bytes: &[u8], res: usize, norm: &Normalization, interleaved: bool) {
    let plane = res * res;
    for c in 0..CHANNELS {
        for p in 0..plane {
            let b = if interleaved { bytes[p * CHANNELS + c] } else { bytes[c * plane + p] };
            out.push(norm.normalize(b as f64 / 255.0, c) as f32);
        }
    }
}

fn load_cifar_binary(root: &Path, name: &str, split: Split, norm: &Normalization) -> Result<Option<LabeledDataset>> {
    let c10: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Val => vec![root.join("test_batch.bin")],
    };
    let c100 = root.join(match split {
        Split::Train => "train.bin",
        Split::Val => "test.bin",
    });
    let (files, label_bytes, num_classes) = if c10.iter().all(|p| p.is_file()) {
        (c10, 1, 10)
    } else if c100.is_file() {
        (vec![c100], 2, 100)
    } else {
        return Ok(None);
    };
    let record = label_bytes + 3072;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut offenders = Vec::new();
    for f in &files {
        let bytes = fs::read(f).at(f)?;
        if bytes.len() % record != 0 {
            offenders.push(format!("{}: length {} is not a multiple of {record}", f.display(), bytes.len()));
            continue;
        }
        for rec in bytes.chunks_exact(record) {
            let label = rec[label_bytes - 1] as usize;
            if label >= num_classes {
                offenders.push(format!("{}: label {label} out of range", f.display()));
                break;
            }
            push_rgb(&mut images, &rec[label_bytes..], 32, norm, false);
            labels.push(label);
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Ingest { offenders });
    }
    let ds = LabeledDataset {
        name: name.to_string(),
        split,
        resolution: 32,
        num_classes,
        class_names: (0..num_classes).map(|i| i.to_string()).collect(),
        normalization: *norm,
        images,
        labels,
    };
    ds.validate()?;
    Ok(Some(ds))
}
