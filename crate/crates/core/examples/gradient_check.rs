//! Finite-difference check of every parameter of the windowed layer, dense
//! attention and a depth-2 E-O model.

use emim::verify::{grad_suite, DEFAULT_GRAD_TOLERANCE};

fn main() -> emim::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let reports = grad_suite(seed, DEFAULT_GRAD_TOLERANCE)?;
    for r in &reports {
        println!("{:<28} max rel {:.3e}  max abs {:.3e}  {}", r.target, r.max_rel_err(), r.max_abs_err(), r.passed());
        for p in r.params.iter().filter(|p| p.max_rel_err > 1e-7) {
            println!("    {:<32} {:>5} coords  rel {:.3e}", p.name, p.checked, p.max_rel_err);
        }
    }
    let ok = reports.iter().all(|r| r.passed());
    println!("seed {seed}: {}", if ok { "all gradients agree" } else { "mismatch" });
    Ok(())
}
