//! The experiment runner: one TOML config drives squeeze, recover, relabel,
//! evaluation and (optionally) continual evaluation into a single directory.
//!
//! ```text
//! <experiment>/config.toml            the resolved config, as run
//! <experiment>/run.json               manifest (hash-protected)
//! <experiment>/squeeze/teacher.ckpt
//! <experiment>/recover/condensed/     condensed dataset directory
//! <experiment>/recover/losses.csv
//! <experiment>/relabel/labels.srl
//! <experiment>/eval/student.ckpt
//! <experiment>/eval/history.csv
//! <experiment>/continual/steps.csv
//! <experiment>/report/                merged CSVs
//! ```
//!
//! A completed stage is never rewritten; re-running or resuming skips it.
//! Every stage seed is taken from the global `seed`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::emit_report;
use crate::continual::{class_incremental_run, write_continual_csv, ContinualConfig};
use crate::data::{load_condensed, load_dataset, save_condensed, toy_dataset, LabeledDataset, Split, ToySpec};
use crate::error::{Error, IoContext, Result};
use crate::evaluate::{train_student, write_history_csv, EvalConfig};
use crate::model_zoo::{load_checkpoint, save_checkpoint, BackboneSpec};
use crate::recover::{recover_report, write_loss_csv, RecoverConfig};
use crate::relabel::{load_archive, relabel, save_archive, RelabelConfig};
use crate::squeeze::{squeeze_train, SqueezeConfig};

pub const MANIFEST_VERSION: u32 = 1;
/// Overrides `output_root` when set.
pub const OUTPUT_ROOT_ENV: &str = "CONDENSE_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetRef {
    /// CIFAR binaries or class folders under `root`; `name` selects the
    /// normalization constants.
    Folder { root: PathBuf, name: String },
    /// The procedurally generated toy set, drawn from the global seed.
    Toy(ToySpec),
}

impl DatasetRef {
    pub fn load(&self, split: Split, seed: u64) -> Result<LabeledDataset> {
        match self {
            DatasetRef::Folder { root, name } => load_dataset(root, name, split),
            DatasetRef::Toy(spec) => toy_dataset(spec, split, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub seed: u64,
    #[serde(default)]
    pub output_root: Option<PathBuf>,
    pub dataset: DatasetRef,
    /// Classes to condense; all classes when absent.
    #[serde(default)]
    pub class_ids: Option<Vec<usize>>,
    pub backbone: BackboneSpec,
    pub squeeze: SqueezeConfig,
    pub recover: RecoverConfig,
    pub relabel: RelabelConfig,
    pub eval: EvalConfig,
    #[serde(default)]
    pub continual: Option<ContinualConfig>,
}

impl ExperimentConfig {
    /// Per-resolution recipes for every stage, with the student equal to
    /// the backbone architecture.
    pub fn with_defaults(dataset: DatasetRef, backbone: BackboneSpec, ipc: usize, seed: u64) -> Self {
        let res = backbone.input_resolution;
        let eval = EvalConfig::for_resolution(backbone.clone());
        Self {
            name: None,
            seed,
            output_root: None,
            dataset,
            class_ids: None,
            squeeze: SqueezeConfig::for_resolution(res),
            recover: RecoverConfig::for_resolution(res, ipc),
            relabel: RelabelConfig::for_resolution(res, eval.epochs),
            eval,
            continual: None,
            backbone,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config serialization: {e}")))
    }

    /// Stage configs with their seeds taken from the global seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.squeeze.seed = c.seed;
        c.recover.seed = c.seed;
        c.relabel.seed = c.seed;
        c.eval.seed = c.seed;
        if let Some(k) = c.continual.as_mut() {
            k.seed = c.seed;
        }
        c
    }

    /// SHA-256 over every field that influences artifacts (the output
    /// location and display name excluded).
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.name = None;
        c.output_root = None;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn classes(&self) -> Vec<usize> {
        self.class_ids.clone().unwrap_or_else(|| (0..self.backbone.num_classes).collect())
    }

    /// Per-stage and cross-stage validation; runs before any stage.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate_structure()?;
        self.squeeze.validate()?;
        self.recover.validate()?;
        self.relabel.validate()?;
        self.eval.validate()?;
        let res = self.backbone.input_resolution;
        let k = self.backbone.num_classes;
        if let DatasetRef::Toy(t) = &self.dataset {
            if t.resolution != res || t.num_classes != k {
                return Err(Error::config(format!(
                    "toy dataset is {} px / {} classes, backbone expects {res} px / {k} classes",
                    t.resolution, t.num_classes
                )));
            }
        }
        if self.eval.student.input_resolution != res || self.eval.student.num_classes != k {
            return Err(Error::config("student resolution and class count must match the backbone"));
        }
        if self.eval.epochs > self.relabel.epochs {
            return Err(Error::config(format!(
                "eval runs {} epochs but relabel only stores {}",
                self.eval.epochs, self.relabel.epochs
            )));
        }
        let classes = self.classes();
        if classes.is_empty() || classes.iter().any(|&c| c >= k) {
            return Err(Error::config(format!("class_ids must be non-empty and below {k}")));
        }
        if let Some(c) = &self.continual {
            if c.steps == 0 || classes.len() % c.steps != 0 {
                return Err(Error::config(format!("{} classes cannot be split into {} continual steps", classes.len(), c.steps)));
            }
        }
        Ok(())
    }

    /// `output_root`, overridden by the environment variable.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .or_else(|| self.output_root.clone())
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// `<output root>/<name>-<hash prefix>`.
    pub fn experiment_dir(&self) -> PathBuf {
        let name = self.name.clone().unwrap_or_else(|| "experiment".into());
        self.output_root().join(format!("{name}-{}", &self.hash()[..12]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Squeeze,
    Recover,
    Relabel,
    Eval,
    Continual,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Squeeze, Stage::Recover, Stage::Relabel, Stage::Eval, Stage::Continual];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Squeeze => "squeeze",
            Stage::Recover => "recover",
            Stage::Relabel => "relabel",
            Stage::Eval => "eval",
            Stage::Continual => "continual",
        }
    }

    fn artifact(self) -> &'static str {
        match self {
            Stage::Squeeze => "squeeze/teacher.ckpt",
            Stage::Recover => "recover/condensed",
            Stage::Relabel => "relabel/labels.srl",
            Stage::Eval => "eval/student.ckpt",
            Stage::Continual => "continual/steps.csv",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown stage `{s}`")))
    }
}

/// Artifacts supplied from outside the experiment, letting a prefix of the
/// stages be skipped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvidedArtifacts {
    pub checkpoint: Option<PathBuf>,
    pub condensed: Option<PathBuf>,
    pub archive: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Complete,
    Provided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub artifact: ArtifactRecord,
    pub wall_seconds: f64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub planned: Vec<Stage>,
    pub stages: BTreeMap<Stage, StageRecord>,
    /// Peak resident set size of the process, when the OS reports it.
    pub peak_memory_kib: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct SealedManifest {
    manifest: RunManifest,
    sha256: String,
}

/// JSON has no NaN, so absent metrics are left out rather than recorded.
fn present<const N: usize>(items: [(&str, Option<f64>); N]) -> BTreeMap<String, f64> {
    items.into_iter().filter_map(|(k, v)| v.filter(|v| v.is_finite()).map(|v| (k.to_string(), v))).collect()
}

fn seal(m: &RunManifest) -> Result<Vec<u8>> {
    let sha256 = hex::encode(Sha256::digest(serde_json::to_vec(m)?));
    Ok(serde_json::to_vec_pretty(&SealedManifest { manifest: m.clone(), sha256 })?)
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<RunManifest> {
    let path = dir.as_ref().join("run.json");
    let bytes = std::fs::read(&path).at(&path)?;
    let sealed: SealedManifest = serde_json::from_slice(&bytes).map_err(|e| Error::corrupt("run manifest", e.to_string()))?;
    if hex::encode(Sha256::digest(serde_json::to_vec(&sealed.manifest)?)) != sealed.sha256 {
        return Err(Error::corrupt("run manifest", "checksum mismatch; the file was edited or truncated"));
    }
    if sealed.manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Version {
            found: sealed.manifest.format_version,
            expected: MANIFEST_VERSION,
        });
    }
    Ok(sealed.manifest)
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    let path = dir.join("run.json");
    let tmp = dir.join("run.json.tmp");
    std::fs::write(&tmp, seal(m)?).at(&tmp)?;
    std::fs::rename(&tmp, &path).at(&path)
}

/// Checksum and size of a file, or of every file under a directory taken in
/// sorted relative-path order.
pub fn artifact_record(path: &Path) -> Result<ArtifactRecord> {
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    let mut bytes = 0;
    for rel in &files {
        let full = if rel.as_os_str().is_empty() { path.to_path_buf() } else { path.join(rel) };
        let data = std::fs::read(&full).at(&full)?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update(&data);
        bytes += data.len() as u64;
    }
    Ok(ArtifactRecord {
        path: path.to_path_buf(),
        sha256: hex::encode(h.finalize()),
        bytes,
    })
}

fn collect_files(root: &Path, p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_dir() {
        for entry in std::fs::read_dir(p).at(p)? {
            collect_files(root, &entry.at(p)?.path(), out)?;
        }
    } else {
        out.push(p.strip_prefix(root).expect("under root").to_path_buf());
    }
    Ok(())
}

fn peak_memory_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

struct Runner<'a> {
    cfg: ExperimentConfig,
    dir: &'a Path,
    manifest: RunManifest,
}

impl Runner<'_> {
    fn done(&self, stage: Stage) -> bool {
        self.manifest.stages.contains_key(&stage)
    }

    fn input(&mut self, stage: Stage, provided: Option<&PathBuf>) -> Result<PathBuf> {
        if let Some(rec) = self.manifest.stages.get(&stage) {
            return Ok(rec.artifact.path.clone());
        }
        let Some(p) = provided else {
            return Err(Error::config(format!(
                "stage {} was neither run nor given as an artifact",
                stage.as_str()
            )));
        };
        let p = std::path::absolute(p).at(p)?;
        let artifact = artifact_record(&p)?;
        self.record(stage, StageStatus::Provided, artifact, 0.0, BTreeMap::new())?;
        Ok(p)
    }

    fn record(&mut self, stage: Stage, status: StageStatus, artifact: ArtifactRecord, wall: f64, metrics: BTreeMap<String, f64>) -> Result<()> {
        self.manifest.stages.insert(
            stage,
            StageRecord {
                status,
                artifact,
                wall_seconds: wall,
                metrics,
            },
        );
        self.manifest.peak_memory_kib = peak_memory_kib().max(self.manifest.peak_memory_kib);
        write_manifest(self.dir, &self.manifest)
    }

    /// Clear leftovers of an interrupted attempt and return the stage dir.
    fn fresh_stage_dir(&self, stage: Stage) -> Result<PathBuf> {
        let d = self.dir.join(stage.as_str());
        if d.exists() {
            std::fs::remove_dir_all(&d).at(&d)?;
        }
        std::fs::create_dir_all(&d).at(&d)?;
        Ok(d)
    }

    fn finish(&mut self, stage: Stage, start: Instant, metrics: BTreeMap<String, f64>) -> Result<()> {
        let artifact = artifact_record(&self.dir.join(stage.artifact()))?;
        log::info!("stage {} complete ({:.1}s)", stage.as_str(), start.elapsed().as_secs_f64());
        self.record(stage, StageStatus::Complete, artifact, start.elapsed().as_secs_f64(), metrics)
    }
}

/// Run `stages` (any subset, executed in canonical order) into the
/// experiment directory and return its path. Stages already complete in
/// that directory are skipped.
pub fn run_pipeline(config: &ExperimentConfig, stages: &[Stage], provided: &ProvidedArtifacts) -> Result<PathBuf> {
    let dir = config.experiment_dir();
    run_pipeline_in(config, stages, provided, &dir)?;
    Ok(dir)
}

/// As [`run_pipeline`] with an explicit experiment directory.
pub fn run_pipeline_in(config: &ExperimentConfig, stages: &[Stage], provided: &ProvidedArtifacts, dir: &Path) -> Result<()> {
    config.validate()?;
    let cfg = config.resolved();
    let hash = cfg.hash();
    let mut planned: Vec<Stage> = stages.to_vec();
    planned.sort();
    planned.dedup();
    if planned.contains(&Stage::Continual) && cfg.continual.is_none() {
        return Err(Error::config("continual stage requested without a [continual] section"));
    }
    std::fs::create_dir_all(dir).at(dir)?;
    let manifest = if dir.join("run.json").exists() {
        let m = load_manifest(dir)?;
        if m.config_hash != hash {
            return Err(Error::config(format!(
                "{} already holds an experiment with config hash {}",
                dir.display(),
                &m.config_hash[..12]
            )));
        }
        let mut m = m;
        for s in &planned {
            if !m.planned.contains(s) {
                m.planned.push(*s);
            }
        }
        m.planned.sort();
        m
    } else {
        let path = dir.join("config.toml");
        std::fs::write(&path, cfg.to_toml()?).at(&path)?;
        RunManifest {
            format_version: MANIFEST_VERSION,
            config_hash: hash,
            seed: cfg.seed,
            planned: planned.clone(),
            stages: BTreeMap::new(),
            peak_memory_kib: None,
        }
    };
    write_manifest(dir, &manifest)?;
    let mut r = Runner { cfg, dir, manifest };
    execute(&mut r, &planned, provided)?;
    write_report(&r)
}

fn execute(r: &mut Runner, planned: &[Stage], provided: &ProvidedArtifacts) -> Result<()> {
    let cfg = r.cfg.clone();
    let val = |cfg: &ExperimentConfig| cfg.dataset.load(Split::Val, cfg.seed);
    if planned.contains(&Stage::Squeeze) && !r.done(Stage::Squeeze) {
        let start = Instant::now();
        let train = cfg.dataset.load(Split::Train, cfg.seed)?;
        let val = val(&cfg)?;
        let ckpt = squeeze_train(&train, &val, &cfg.backbone, &cfg.squeeze)?;
        let d = r.fresh_stage_dir(Stage::Squeeze)?;
        save_checkpoint(&ckpt, d.join("teacher.ckpt"))?;
        let metrics = present([("val_top1", ckpt.meta.val_top1)]);
        r.finish(Stage::Squeeze, start, metrics)?;
    }
    if planned.contains(&Stage::Recover) && !r.done(Stage::Recover) {
        let ckpt_path = r.input(Stage::Squeeze, provided.checkpoint.as_ref())?;
        let start = Instant::now();
        let ckpt = load_checkpoint(&ckpt_path)?;
        let d = r.fresh_stage_dir(Stage::Recover)?;
        let report = recover_report(&ckpt, &cfg.recover, &cfg.classes(), Some(&d.join("partial")))?;
        save_condensed(&report.condensed, d.join("condensed"))?;
        write_loss_csv(d.join("losses.csv"), &report.losses)?;
        let mut metrics = BTreeMap::from([
            ("ms_per_image".to_string(), report.ms_per_image),
            ("condensed_payload_bytes".to_string(), report.condensed.payload_bytes() as f64),
        ]);
        if let Some(l) = report.losses.last() {
            metrics.insert("final_total_loss".into(), l.total);
        }
        r.finish(Stage::Recover, start, metrics)?;
    }
    if planned.contains(&Stage::Relabel) && !r.done(Stage::Relabel) {
        let cd_path = r.input(Stage::Recover, provided.condensed.as_ref())?;
        let ckpt_path = r.input(Stage::Squeeze, provided.checkpoint.as_ref())?;
        let start = Instant::now();
        let cd = load_condensed(&cd_path)?;
        let teacher = load_checkpoint(&ckpt_path)?;
        let archive = relabel(&cd, &teacher, &cfg.relabel)?;
        let d = r.fresh_stage_dir(Stage::Relabel)?;
        let bytes = save_archive(&archive, d.join("labels.srl"))?;
        r.finish(Stage::Relabel, start, BTreeMap::from([("archive_bytes".to_string(), bytes as f64)]))?;
    }
    let needs_labels = planned.contains(&Stage::Eval) || planned.contains(&Stage::Continual);
    if needs_labels && !(r.done(Stage::Eval) && (r.done(Stage::Continual) || !planned.contains(&Stage::Continual))) {
        let cd = load_condensed(r.input(Stage::Recover, provided.condensed.as_ref())?)?;
        let archive = load_archive(r.input(Stage::Relabel, provided.archive.as_ref())?)?;
        let val = val(&cfg)?;
        if planned.contains(&Stage::Eval) && !r.done(Stage::Eval) {
            let start = Instant::now();
            let report = train_student(&cd, &archive, &cfg.eval, Some(&val))?;
            let d = r.fresh_stage_dir(Stage::Eval)?;
            write_history_csv(d.join("history.csv"), &report.history)?;
            save_checkpoint(&report.checkpoint, d.join("student.ckpt"))?;
            let metrics = present([("student_top1", report.final_top1)]);
            r.finish(Stage::Eval, start, metrics)?;
        }
        if planned.contains(&Stage::Continual) && !r.done(Stage::Continual) {
            let start = Instant::now();
            let ccfg = cfg.continual.as_ref().expect("checked above");
            let steps = class_incremental_run(&cd, &archive, &cfg.eval, &val, ccfg)?;
            let d = r.fresh_stage_dir(Stage::Continual)?;
            write_continual_csv(d.join("steps.csv"), &steps)?;
            let metrics = present([("final_top1", steps.last().map(|s| s.top1))]);
            r.finish(Stage::Continual, start, metrics)?;
        }
    }
    Ok(())
}

fn write_report(r: &Runner) -> Result<()> {
    let candidates = [
        ("recover_losses", "recover/losses.csv", Stage::Recover),
        ("eval_history", "eval/history.csv", Stage::Eval),
        ("continual_steps", "continual/steps.csv", Stage::Continual),
    ];
    let inputs: Vec<(String, PathBuf)> = candidates
        .iter()
        .filter(|(_, _, s)| r.manifest.stages.get(s).is_some_and(|rec| rec.status == StageStatus::Complete))
        .map(|(label, rel, _)| (label.to_string(), r.dir.join(rel)))
        .collect();
    if !inputs.is_empty() {
        emit_report(&inputs, r.dir.join("report"))?;
    }
    Ok(())
}

/// Continue an experiment from its last completed stage, running whatever
/// remains of the stages it was started with.
pub fn resume(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if !dir.join("run.json").exists() {
        return Err(Error::config(format!("no experiment at {}", dir.display())));
    }
    let manifest = load_manifest(dir)?;
    let cfg = ExperimentConfig::load(dir.join("config.toml"))?;
    if cfg.hash() != manifest.config_hash {
        return Err(Error::corrupt("experiment", "config.toml no longer matches the manifest's config hash"));
    }
    let remaining: Vec<Stage> = manifest.planned.iter().copied().filter(|s| !manifest.stages.contains_key(s)).collect();
    if remaining.is_empty() {
        log::info!("{}: every planned stage is complete", dir.display());
        return Ok(());
    }
    run_pipeline_in(&cfg, &manifest.planned, &ProvidedArtifacts::default(), dir)
}

/// Human-readable summary of an experiment directory.
pub fn inspect(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    if !dir.join("run.json").exists() {
        return Ok(format!("no experiment at {}\n", dir.display()));
    }
    let m = load_manifest(dir)?;
    let mut s = String::new();
    let _ = writeln!(s, "experiment {}", dir.display());
    let _ = writeln!(s, "config hash {}  seed {}", &m.config_hash[..16], m.seed);
    for stage in Stage::ALL {
        if !m.planned.contains(&stage) && !m.stages.contains_key(&stage) {
            continue;
        }
        match m.stages.get(&stage) {
            Some(rec) => {
                let status = match rec.status {
                    StageStatus::Complete => "complete",
                    StageStatus::Provided => "provided",
                };
                let metrics: Vec<String> = rec.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
                let _ = writeln!(
                    s,
                    "{:<10}{:<10}{:>9.2}s  {:>12} B  {}",
                    stage.as_str(),
                    status,
                    rec.wall_seconds,
                    rec.artifact.bytes,
                    metrics.join(" ")
                );
            }
            None => {
                let _ = writeln!(s, "{:<10}pending", stage.as_str());
            }
        }
    }
    let size = |st: Stage| m.stages.get(&st).map(|r| r.artifact.bytes);
    if let Some(b) = size(Stage::Recover) {
        let _ = writeln!(s, "condensed dataset: {b} bytes");
    }
    if let Some(b) = size(Stage::Relabel) {
        let _ = writeln!(s, "soft-label archive: {b} bytes");
    }
    if let Some(kib) = m.peak_memory_kib {
        let _ = writeln!(s, "peak memory: {kib} KiB");
    }
    Ok(s)
}
