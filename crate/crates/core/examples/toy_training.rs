//! The direction-classification run with and without the motion MLP.
//!
//! `cargo run --release --example toy_training [clips]`; the default of 2000
//! clips takes a few minutes on one core.

use emim::train::ToyExperiment;

fn main() -> emim::Result<()> {
    let mut exp = ToyExperiment::default();
    if let Some(n) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        exp.data.clips = n;
    }
    for (name, e) in [("with motion", exp.clone()), ("without motion", exp.ablated())] {
        println!("{name}");
        let (_, report) = e.run(|m| {
            println!("  epoch {} loss {:.4} train {:.4} val {:.4}", m.epoch + 1, m.train_loss, m.train_acc, m.val_acc)
        })?;
        println!("  untrained {:.4} -> final {:.4}", report.initial_val_acc, report.final_val_acc());
    }
    Ok(())
}
