//! Embedding export and the information-theoretic quantities used to reason
//! about condensed data: a leave-one-out mutual-information upper bound and
//! the input compression bound on generalization error.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! 8      magic "SREMBED\0"
//! 4      format version (u32)
//! 8      rows N (u64)
//! 8      columns D (u64)
//! 4      checkpoint id length L (u32)
//! L      checkpoint id, UTF-8
//! 4·N·D  f32 payload, row-major, rows in input order
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::model_zoo::{Checkpoint, Network};
use crate::nn::{ParamMode, Pass};

pub const EMBEDDING_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SREMBED\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub checkpoint_id: String,
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Embeddings {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Penultimate-layer features of `images` (`[N, 3, H, W]`), inference mode.
pub fn extract_embeddings(checkpoint: &Checkpoint, images: &Tensor) -> Result<Embeddings> {
    let net = Network::from_checkpoint(checkpoint, ParamMode::Frozen)?;
    let n = images.dim(0)?;
    let mut data = Vec::new();
    let mut start = 0;
    while start < n {
        let len = 256.min(n - start);
        let f = net.features(&images.narrow(0, start, len)?, &mut Pass::eval())?;
        data.extend(f.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
        start += len;
    }
    Ok(Embeddings {
        checkpoint_id: checkpoint.id()?,
        rows: n,
        dim: net.feature_dim(),
        data,
    })
}

pub fn save_embeddings(emb: &Embeddings, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(32 + emb.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(emb.rows as u64).to_le_bytes());
    out.extend_from_slice(&(emb.dim as u64).to_le_bytes());
    out.extend_from_slice(&(emb.checkpoint_id.len() as u32).to_le_bytes());
    out.extend_from_slice(emb.checkpoint_id.as_bytes());
    emb.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    std::fs::write(path, out).at(path)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Embeddings> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).at(path)?;
    let corrupt = |why: &str| Error::corrupt("embedding file", why.to_string());
    if bytes.len() < 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != EMBEDDING_VERSION {
        return Err(Error::Version {
            found: version,
            expected: EMBEDDING_VERSION,
        });
    }
    let rows = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let dim = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
    let id_len = u32::from_le_bytes(bytes[28..32].try_into().expect("4 bytes")) as usize;
    let body = 32 + id_len;
    if bytes.len() < body || bytes.len() - body != rows * dim * 4 {
        return Err(corrupt("payload size does not match N × D"));
    }
    let checkpoint_id = String::from_utf8(bytes[32..body].to_vec()).map_err(|_| corrupt("checkpoint id is not UTF-8"))?;
    let data = bytes[body..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Embeddings {
        checkpoint_id,
        rows,
        dim,
        data,
    })
}

/// Tab-separated text copy for tools that do not read the binary form.
pub fn save_embeddings_tsv(emb: &Embeddings, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path).map_err(|e| csv_error(path, e))?;
    for i in 0..emb.rows {
        w.write_record(emb.row(i).iter().map(|v| v.to_string())).map_err(|e| csv_error(path, e))?;
    }
    w.flush().at(path)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Leave-one-out upper bound on I(X; D) in nats, from `cond[i][j] = p(d_i | x_j)`:
///
/// `(1/N) Σ_i ln( p(d_i|x_i) / ((1/(N−1)) Σ_{j≠i} p(d_i|x_j)) )`
pub fn mutual_info_upper_bound(cond: &[Vec<f64>]) -> Result<f64> {
    let n = cond.len();
    if n < 2 {
        return Err(Error::Domain(format!("need at least 2 samples, got {n}")));
    }
    let mut acc = 0.0;
    for (i, row) in cond.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Domain(format!("row {i} has {} entries, expected {n}", row.len())));
        }
        if let Some(bad) = row.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("density {bad} in row {i} is not a positive finite number")));
        }
        let others: f64 = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v).sum();
        acc += (row[i] / (others / (n - 1) as f64)).ln();
    }
    Ok(acc / n as f64)
}

pub fn nats_to_bits(nats: f64) -> f64 {
    nats / std::f64::consts::LN_2
}

/// Bases used by [`generalization_bound_icb_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcbBases {
    /// Base raised to the mutual information.
    pub exponent: f64,
    /// Base of the logarithm in the confidence term.
    pub log: f64,
}

impl Default for IcbBases {
    fn default() -> Self {
        Self {
            exponent: 2.0,
            log: std::f64::consts::E,
        }
    }
}

/// `sqrt((2^I + ln(1/δ)) / (2 N))` with `I` in bits.
pub fn generalization_bound_icb(mi_bits: f64, delta: f64, n_train: usize) -> Result<f64> {
    generalization_bound_icb_with(mi_bits, delta, n_train, IcbBases::default())
}

pub fn generalization_bound_icb_with(mi: f64, delta: f64, n_train: usize, bases: IcbBases) -> Result<f64> {
    if n_train == 0 {
        return Err(Error::Domain("N_trn must be ≥ 1".into()));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Domain(format!("δ = {delta} is outside (0, 1]")));
    }
    if !mi.is_finite() || bases.exponent <= 0.0 || bases.log <= 0.0 || bases.log == 1.0 {
        return Err(Error::Domain("mutual information and bases must be finite and positive".into()));
    }
    let confidence = (1.0 / delta).ln() / bases.log.ln();
    Ok(((bases.exponent.powf(mi) + confidence) / (2.0 * n_train as f64)).sqrt())
}

#[derive(Debug, Serialize)]
struct ReportSource {
    label: String,
    file: String,
    sha256: String,
    rows: usize,
    columns: Vec<String>,
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub manifest: PathBuf,
}

/// Merge labelled CSV inputs into `report.csv` (long format:
/// `source,row,column,value`) plus a `report.json` manifest of the inputs.
/// Output depends only on input contents, so re-running is idempotent.
pub fn emit_report(inputs: &[(String, PathBuf)], out_dir: impl AsRef<Path>) -> Result<ReportFiles> {
    let out_dir = out_dir.as_ref();
    let mut sources = Vec::with_capacity(inputs.len());
    let mut seen = BTreeMap::new();
    let table = out_dir.join("report.csv");
    let mut parsed = Vec::new();
    for (label, path) in inputs {
        if seen.insert(label.clone(), ()).is_some() {
            return Err(Error::config(format!("report label `{label}` is used twice")));
        }
        let bytes = std::fs::read(path).at(path)?;
        let mut r = csv::Reader::from_reader(bytes.as_slice());
        let columns: Vec<String> = r.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_owned).collect();
        let rows: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>().map_err(|e| csv_error(path, e))?;
        sources.push(ReportSource {
            label: label.clone(),
            file: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            rows: rows.len(),
            columns: columns.clone(),
        });
        parsed.push((label, columns, rows));
    }
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let mut w = csv::Writer::from_path(&table).map_err(|e| csv_error(&table, e))?;
    w.write_record(["source", "row", "column", "value"]).map_err(|e| csv_error(&table, e))?;
    for (label, columns, rows) in &parsed {
        for (i, rec) in rows.iter().enumerate() {
            for (col, value) in columns.iter().zip(rec.iter()) {
                w.write_record([label.as_str(), &i.to_string(), col, value]).map_err(|e| csv_error(&table, e))?;
            }
        }
    }
    w.flush().at(&table)?;
    let manifest = out_dir.join("report.json");
    std::fs::write(&manifest, serde_json::to_vec_pretty(&serde_json::json!({ "sources": sources }))?).at(&manifest)?;
    Ok(ReportFiles { table, manifest })
}
