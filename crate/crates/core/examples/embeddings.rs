//! Dump penultimate-layer embeddings of real and condensed images for an
//! external projection tool.

use condense::analysis::{extract_embeddings, save_embeddings, save_embeddings_tsv};
use condense::data::{toy_dataset, Split, ToySpec};
use condense::model_zoo::{ArchId, BackboneSpec};
use condense::recover::{recover, RecoverConfig};
use condense::squeeze::{squeeze_train, SqueezeConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let train = toy_dataset(&ToySpec::new(4, 50, 32), Split::Train, 0)?;
    let val = toy_dataset(&ToySpec::new(4, 20, 32), Split::Val, 0)?;
    let spec = BackboneSpec::new(ArchId::Convnet4, 32, 4).with_width(16).with_depth(3);
    let mut sq = SqueezeConfig::for_resolution(32);
    sq.epochs = 5;
    let teacher = squeeze_train(&train, &val, &spec, &sq)?;
    let mut rc = RecoverConfig::for_resolution(32, 3);
    rc.iterations = 100;
    let cd = recover(&teacher, &rc, &[0, 1, 2, 3])?;

    let dir = std::env::temp_dir().join("condense-embeddings");
    std::fs::create_dir_all(&dir)?;
    let real = extract_embeddings(&teacher, &val.batch(&(0..val.len()).collect::<Vec<_>>())?)?;
    let synth = extract_embeddings(&teacher, &cd.batch(&(0..cd.len()).collect::<Vec<_>>())?)?;
    for (name, emb) in [("real", &real), ("condensed", &synth)] {
        save_embeddings(emb, dir.join(format!("{name}.emb")))?;
        save_embeddings_tsv(emb, dir.join(format!("{name}.tsv")))?;
        println!("{name:<9} {} rows × {} dims", emb.rows, emb.dim);
    }
    println!("wrote {}", dir.display());
    Ok(())
}
