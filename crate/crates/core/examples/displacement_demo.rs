//! The raw affinity argmax of a translated noise pair points at the shift.

use emim::attention::EmimConfig;
use emim::synthetic::{displacement_probe, gen_translation_pair, recovery_sweep};

fn main() -> emim::Result<()> {
    let cfg = EmimConfig::default();
    let pair = gen_translation_pair(3, (16, 16), (2, -1), cfg.radius)?;
    let r = displacement_probe(&pair, &cfg)?;
    println!("true shift {:?}, predicted {:?} ({}/{} queries agree)", pair.shift, r.predicted, r.votes, r.queries);

    let entries = recovery_sweep(&cfg, &[], 5, 16, 0)?;
    let ok = entries.iter().filter(|e| e.correct()).count();
    println!("every shift in the 7x7 window, 5 clips each: {ok}/{}", entries.len());

    // One step of interval 2 covers twice the per-frame shift.
    let wide = EmimConfig { interval: 2, ..cfg };
    let entries = recovery_sweep(&wide, &[(1, 1), (-1, 0), (0, 1)], 3, 16, 0)?;
    let ok = entries.iter().filter(|e| e.correct()).count();
    println!("interval 2: {ok}/{}", entries.len());
    match recovery_sweep(&wide, &[(2, 0)], 1, 16, 0) {
        Err(e) => println!("interval 2, shift (2,0): {e}"),
        Ok(_) => println!("interval 2, shift (2,0): unexpectedly accepted"),
    }
    Ok(())
}
