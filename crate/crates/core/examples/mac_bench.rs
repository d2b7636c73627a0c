//! Analytic MAC counts next to counts taken from the instrumented naive
//! kernels, for the three attention mechanisms.

use emim::attention::{EmimConfig, VolumeDims};
use emim::verify::{instrumented_count, mac_count, Mechanism};

fn main() -> emim::Result<()> {
    let cfg = EmimConfig::default();
    let big = VolumeDims { frames: 8, height: 14, width: 14, channels: 64 };
    println!("T=8 14x14 d=64, radius {}", cfg.radius);
    for mech in [Mechanism::Global, Mechanism::Emim, Mechanism::NonSliding] {
        let m = mac_count(big, &cfg, mech, true);
        println!("{:<12} attention {:>12}  total {:>12}", mech.name(), m.attention(), m.total());
    }
    let g = mac_count(big, &cfg, Mechanism::Global, true).attention();
    let e = mac_count(big, &cfg, Mechanism::Emim, false).attention();
    println!("affinity+aggregation ratio {:.5} (49/1568 = {:.5})", e as f64 / g as f64, 49.0 / 1568.0);

    // The instrumented kernels are slow, so the comparison runs small.
    let small = VolumeDims { frames: 2, height: 5, width: 5, channels: 8 };
    let cfg = EmimConfig { radius: 1, heads: 2, ..Default::default() };
    println!("\nT=2 5x5 d=8, radius 1, 2 heads");
    for mech in [Mechanism::Global, Mechanism::Emim] {
        let analytic = mac_count(small, &cfg, mech, true).counter();
        let counted = instrumented_count(small, &cfg, mech, true, 0)?;
        println!("{:<12} analytic {:?}\n{:<12} counted  {:?}", mech.name(), analytic, "", counted);
        assert_eq!(analytic, counted);
    }
    Ok(())
}
