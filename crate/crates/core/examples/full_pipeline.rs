//! One experiment config drives every stage; the run directory records
//! checksums so an interrupted run can be resumed.

use condense::continual::ContinualConfig;
use condense::data::ToySpec;
use condense::model_zoo::{ArchId, BackboneSpec};
use condense::pipeline::{inspect, resume, run_pipeline, DatasetRef, ExperimentConfig, ProvidedArtifacts, Stage};

fn main() -> condense::Result<()> {
    let spec = BackboneSpec::new(ArchId::Convnet4, 32, 4).with_width(16).with_depth(3);
    let mut cfg = ExperimentConfig::with_defaults(DatasetRef::Toy(ToySpec::new(4, 50, 32)), spec, 2, 0);
    cfg.name = Some("toy".into());
    cfg.output_root = Some(std::env::temp_dir().join("condense-runs"));
    cfg.squeeze.epochs = 8;
    cfg.recover.iterations = 100;
    cfg.relabel.epochs = 40;
    cfg.eval.epochs = 40;
    cfg.continual = Some(ContinualConfig {
        steps: 2,
        classes_per_step: None,
        memory_per_class: None,
        seed: 0,
    });
    println!("{}", cfg.to_toml()?);

    let stages = [Stage::Squeeze, Stage::Recover, Stage::Relabel, Stage::Eval, Stage::Continual];
    let dir = run_pipeline(&cfg, &stages, &ProvidedArtifacts::default())?;
    // Every stage is recorded complete, so this does nothing.
    resume(&dir)?;
    println!("{}", inspect(&dir)?);
    Ok(())
}
