use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use condense::analysis::{
    emit_report, extract_embeddings, generalization_bound_icb, load_embeddings, mutual_info_upper_bound, nats_to_bits, save_embeddings,
    save_embeddings_tsv,
};
use condense::augment::Augmentation;
use condense::continual::{class_incremental_run, write_continual_csv, ContinualConfig};
use condense::data::{load_condensed, load_dataset, save_condensed, toy_dataset, LabeledDataset, Split, ToySpec};
use condense::evaluate::{train_student, write_history_csv, EvalConfig};
use condense::model_zoo::{load_checkpoint, save_checkpoint, ArchId, BackboneSpec};
use condense::pipeline::{inspect, resume, run_pipeline, ExperimentConfig, ProvidedArtifacts, Stage};
use condense::recover::{recover_report, write_loss_csv, RecoverConfig};
use condense::relabel::{relabel, save_archive, LabelPrecision, RelabelConfig};
use condense::squeeze::{squeeze_train, SqueezeConfig};
use condense::{Error, Result};

#[derive(Parser)]
#[command(name = "condense", version, about = "Dataset condensation: squeeze, recover, relabel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a backbone on a labeled dataset and write a checkpoint.
    Squeeze(SqueezeArgs),
    /// Synthesize condensed images from a checkpoint.
    Recover(RecoverArgs),
    /// Pre-generate crop-level soft labels for a condensed set.
    Relabel(RelabelArgs),
    /// Train a student on a condensed set and report validation top-1.
    Eval(EvalArgs),
    /// Class-incremental evaluation over a condensed set.
    Continual(ContinualArgs),
    /// Embeddings and information bounds.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Run an experiment config end to end.
    Run(RunArgs),
    /// Continue an interrupted experiment.
    Resume { dir: PathBuf },
    /// Summarize an experiment directory.
    Inspect { dir: PathBuf },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root (CIFAR binaries or class folders), or `toy`.
    #[arg(long)]
    data: String,
    /// Normalization key for folder datasets.
    #[arg(long, default_value = "imagenet")]
    dataset_name: String,
    #[arg(long, default_value_t = 10)]
    toy_classes: usize,
    #[arg(long, default_value_t = 100)]
    toy_per_class: usize,
    #[arg(long, default_value_t = 32)]
    toy_resolution: usize,
    #[arg(long, default_value_t = 0)]
    toy_seed: u64,
}

impl DataArgs {
    fn load(&self, split: Split) -> Result<LabeledDataset> {
        if self.data == "toy" {
            toy_dataset(&ToySpec::new(self.toy_classes, self.toy_per_class, self.toy_resolution), split, self.toy_seed)
        } else {
            load_dataset(&self.data, &self.dataset_name, split)
        }
    }
}

#[derive(Args)]
struct ArchArgs {
    #[arg(long, default_value = "convnet4")]
    arch: ArchId,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
}

impl ArchArgs {
    fn spec(&self, resolution: usize, classes: usize) -> BackboneSpec {
        let mut s = BackboneSpec::new(self.arch, resolution, classes);
        if let Some(w) = self.width {
            s = s.with_width(w);
        }
        if let Some(d) = self.depth {
            s = s.with_depth(d);
        }
        s
    }
}

#[derive(Args)]
struct SqueezeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated: rrc, crop, mixup, cutmix.
    #[arg(long, value_delimiter = ',')]
    aug: Option<Vec<Augmentation>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecoverArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    ipc: usize,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    alpha_bn: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    tv: f64,
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated class ids; every class when omitted.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration loss CSV; defaults to `<out>/losses.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct RelabelArgs {
    #[arg(long)]
    condensed: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: usize,
    /// f32, f16 or topK (e.g. top10).
    #[arg(long, default_value = "f16")]
    precision: LabelPrecision,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StudentArgs {
    #[arg(long)]
    condensed: PathBuf,
    #[arg(long)]
    archive: PathBuf,
    /// Validation data.
    #[command(flatten)]
    data: DataArgs,
    #[arg(long = "student", default_value = "convnet4")]
    arch: ArchId,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl StudentArgs {
    fn eval_config(&self, resolution: usize, classes: usize) -> EvalConfig {
        let arch = ArchArgs {
            arch: self.arch,
            width: self.width,
            depth: self.depth,
        };
        let mut cfg = EvalConfig::for_resolution(arch.spec(resolution, classes));
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.seed = self.seed;
        cfg
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    student: StudentArgs,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    save_student: Option<PathBuf>,
}

#[derive(Args)]
struct ContinualArgs {
    #[command(flatten)]
    student: StudentArgs,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    memory_per_class: Option<usize>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Penultimate features of condensed or dataset images.
    Embeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        condensed: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a tab-separated copy.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Leave-one-out MI upper bound from a CSV matrix of p(d_i | x_j).
    Mi {
        #[arg(long)]
        matrix: PathBuf,
    },
    /// Input compression bound.
    Icb {
        #[arg(long, conflicts_with = "mi_nats")]
        mi_bits: Option<f64>,
        #[arg(long)]
        mi_nats: Option<f64>,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        n_train: usize,
    },
    /// Merge CSVs given as label=path into one report directory.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the header of an embedding file.
    Describe { file: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated subset of squeeze, recover, relabel, eval, continual.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<Stage>>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    condensed: Option<PathBuf>,
    #[arg(long)]
    archive: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Squeeze(a) => {
            let train = a.data.load(Split::Train)?;
            let val = a.data.load(Split::Val)?;
            let mut cfg = SqueezeConfig::for_resolution(train.resolution);
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(aug) = a.aug {
                cfg.augmentations = aug;
            }
            if let Some(lr) = a.lr {
                cfg.optimizer.lr = lr;
            }
            if let Some(b) = a.batch_size {
                cfg.batch_size = b;
            }
            cfg.seed = a.seed;
            let ckpt = squeeze_train(&train, &val, &a.arch.spec(train.resolution, train.num_classes), &cfg)?;
            save_checkpoint(&ckpt, &a.out)?;
            println!("checkpoint {} val_top1 {:.4}", ckpt.id()?, ckpt.meta.val_top1.unwrap_or(f64::NAN));
        }
        Command::Recover(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let mut cfg = RecoverConfig::for_resolution(ckpt.spec.input_resolution, a.ipc);
            if let Some(i) = a.iters {
                cfg.iterations = i;
            }
            if let Some(b) = a.alpha_bn {
                cfg.alpha_bn = b;
            }
            if let Some(lr) = a.lr {
                cfg.lr = lr;
            }
            cfg.alpha_tv = a.tv;
            cfg.alpha_l2 = a.l2;
            cfg.seed = a.seed;
            let classes = a.classes.unwrap_or_else(|| (0..ckpt.spec.num_classes).collect());
            let report = recover_report(&ckpt, &cfg, &classes, Some(&a.out.join("partial")))?;
            save_condensed(&report.condensed, &a.out)?;
            write_loss_csv(a.loss_csv.unwrap_or_else(|| a.out.join("losses.csv")), &report.losses)?;
            println!("{} images, {:.2} ms/image", report.condensed.len(), report.ms_per_image);
        }
        Command::Relabel(a) => {
            let cd = load_condensed(&a.condensed)?;
            let teacher = load_checkpoint(&a.teacher)?;
            let mut cfg = RelabelConfig::for_resolution(cd.resolution, a.epochs);
            if let Some(t) = a.tau {
                cfg.temperature = t;
            }
            cfg.precision = a.precision;
            cfg.seed = a.seed;
            let bytes = save_archive(&relabel(&cd, &teacher, &cfg)?, &a.out)?;
            println!("archive {} bytes", bytes);
        }
        Command::Eval(a) => {
            let cd = load_condensed(&a.student.condensed)?;
            let archive = condense::relabel::load_archive(&a.student.archive)?;
            let val = a.student.data.load(Split::Val)?;
            let cfg = a.student.eval_config(cd.resolution, cd.num_classes);
            let report = train_student(&cd, &archive, &cfg, Some(&val))?;
            write_history_csv(&a.report, &report.history)?;
            if let Some(p) = a.save_student {
                save_checkpoint(&report.checkpoint, p)?;
            }
            println!("student val_top1 {:.4}", report.final_top1.unwrap_or(f64::NAN));
        }
        Command::Continual(a) => {
            let cd = load_condensed(&a.student.condensed)?;
            let archive = condense::relabel::load_archive(&a.student.archive)?;
            let val = a.student.data.load(Split::Val)?;
            let cfg = a.student.eval_config(cd.resolution, cd.num_classes);
            let ccfg = ContinualConfig {
                steps: a.steps,
                classes_per_step: None,
                memory_per_class: a.memory_per_class,
                seed: a.student.seed,
            };
            let steps = class_incremental_run(&cd, &archive, &cfg, &val, &ccfg)?;
            write_continual_csv(&a.report, &steps)?;
            for s in &steps {
                println!("step {} classes {} top1 {:.4}", s.step, s.classes_seen, s.top1);
            }
        }
        Command::Analyze { what } => analyze(what)?,
        Command::Run(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let stages = a.stages.unwrap_or_else(|| {
                let mut s = vec![Stage::Squeeze, Stage::Recover, Stage::Relabel, Stage::Eval];
                if cfg.continual.is_some() {
                    s.push(Stage::Continual);
                }
                s
            });
            let provided = ProvidedArtifacts {
                checkpoint: a.checkpoint,
                condensed: a.condensed,
                archive: a.archive,
            };
            let dir = run_pipeline(&cfg, &stages, &provided)?;
            print!("{}", inspect(&dir)?);
        }
        Command::Resume { dir } => {
            resume(&dir)?;
            print!("{}", inspect(&dir)?);
        }
        Command::Inspect { dir } => print!("{}", inspect(&dir)?),
    }
    Ok(())
}

fn analyze(what: AnalyzeCommand) -> Result<()> {
    match what {
        AnalyzeCommand::Embeddings { ckpt, condensed, out, tsv } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let cd = load_condensed(&condensed)?;
            let all: Vec<usize> = (0..cd.len()).collect();
            let emb = extract_embeddings(&ckpt, &cd.batch(&all)?)?;
            save_embeddings(&emb, &out)?;
            if let Some(p) = tsv {
                save_embeddings_tsv(&emb, p)?;
            }
            println!("{} × {} embeddings from {}", emb.rows, emb.dim, emb.checkpoint_id);
        }
        AnalyzeCommand::Describe { file } => {
            let emb = load_embeddings(&file)?;
            println!("rows {} dim {} checkpoint {}", emb.rows, emb.dim, emb.checkpoint_id);
        }
        AnalyzeCommand::Mi { matrix } => {
            let mut r = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_path(&matrix)
                .map_err(|e| Error::config(format!("{}: {e}", matrix.display())))?;
            let mut rows = Vec::new();
            for rec in r.records() {
                let rec = rec.map_err(|e| Error::config(format!("{}: {e}", matrix.display())))?;
                let row = rec
                    .iter()
                    .map(|v| v.trim().parse::<f64>().map_err(|_| Error::config(format!("`{v}` is not a number"))))
                    .collect::<Result<Vec<_>>>()?;
                rows.push(row);
            }
            let nats = mutual_info_upper_bound(&rows)?;
            println!("I_UB {nats:.6} nats ({:.6} bits)", nats_to_bits(nats));
        }
        AnalyzeCommand::Icb {
            mi_bits,
            mi_nats,
            delta,
            n_train,
        } => {
            let bits = match (mi_bits, mi_nats) {
                (Some(b), _) => b,
                (None, Some(n)) => nats_to_bits(n),
                (None, None) => return Err(Error::config("give --mi-bits or --mi-nats")),
            };
            println!("GE_ICB < {:.6}", generalization_bound_icb(bits, delta, n_train)?);
        }
        AnalyzeCommand::Report { inputs, out } => {
            let pairs = inputs
                .iter()
                .map(|s| {
                    s.split_once('=')
                        .map(|(l, p)| (l.to_string(), PathBuf::from(p)))
                        .ok_or_else(|| Error::config(format!("report input `{s}` must be label=path")))
                })
                .collect::<Result<Vec<_>>>()?;
            let files = emit_report(&pairs, &out)?;
            println!("{}", files.table.display());
        }
    }
    Ok(())
}
