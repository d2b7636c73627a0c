//! The four two-block replacement patterns, their parameter counts and the
//! logits they produce on one clip.

use emim::block::{build_stack, ModelConfig};
use emim::synthetic::{gen_clip, clip_rng};
use emim::Parameters;

fn main() -> emim::Result<()> {
    let clip = gen_clip(&mut clip_rng(0, 0), 2, (16, 16), (1, 0), 0)?;
    for text in ["EO", "OE", "EE", "OO"] {
        let cfg = ModelConfig { pattern: text.parse()?, ..Default::default() };
        let model = build_stack(&cfg, 0)?;
        let mut count = 0;
        model.params.visit("", &mut |_, t| count += t.len());
        let logits = model.forward(&clip.clip)?;
        let letters: String = model.kinds().iter().map(|k| k.letter()).collect();
        println!("{text}: blocks {letters}  params {count:>6}  logits[0..3] {:.4?}", &logits.data()[..3]);
    }
    let ablated = ModelConfig { ablate_motion: true, ..Default::default() };
    let mut count = 0;
    build_stack(&ablated, 0)?.params.visit("", &mut |_, t| count += t.len());
    println!("EO without motion: params {count:>6}");
    Ok(())
}
