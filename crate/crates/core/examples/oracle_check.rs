//! Differential test of the optimized layers against the naive loop
//! references, then a replay of one configuration from its seed.

use emim::verify::{oracle_equivalence, replay, trial_seed, DEFAULT_ORACLE_TOLERANCE};

fn main() -> emim::Result<()> {
    let report = oracle_equivalence(100, 0, DEFAULT_ORACLE_TOLERANCE)?;
    println!("configs            {}", report.trials.len());
    println!("max |opt - naive|  {:.3e}", report.max_abs_err());
    println!("max row-sum error  {:.3e}", report.max_norm_sum_err());
    println!("passed             {}", report.passed());

    let worst = report
        .trials
        .iter()
        .max_by(|a, b| a.max_abs_err().total_cmp(&b.max_abs_err()))
        .expect("at least one trial");
    println!("\nworst configuration:\n{}", worst.case.to_text());
    let again = replay(worst.case.seed)?;
    assert_eq!(again.max_abs_err(), worst.max_abs_err());
    println!("replayed from seed {} with identical deviation", worst.case.seed);
    assert_eq!(trial_seed(0, 0), report.trials[0].case.seed);
    Ok(())
}
