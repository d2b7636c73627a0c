//! Trains briefly, saves a checkpoint and checks the reloaded model predicts
//! identically.

use emim::block::{load_checkpoint, save_checkpoint};
use emim::train::ToyExperiment;

fn main() -> emim::Result<()> {
    let mut exp = ToyExperiment::default();
    exp.data.clips = 80;
    exp.train.epochs = 1;
    let (model, report) = exp.run(|_| {})?;
    println!("val acc after one short epoch {:.3}", report.final_val_acc());

    let dir = std::env::temp_dir().join("emim-checkpoint-example");
    save_checkpoint(&model, &dir)?;
    let back = load_checkpoint(&dir)?;
    let clip = emim::synthetic::gen_clip(&mut emim::synthetic::clip_rng(9, 0), 2, (16, 16), (0, 1), 0)?;
    let (a, b) = (model.forward(&clip.clip)?, back.forward(&clip.clip)?);
    assert_eq!(a, b);
    println!("reloaded from {}: logits bit-identical", dir.display());
    Ok(())
}
