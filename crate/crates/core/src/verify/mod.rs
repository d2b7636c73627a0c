//! Finite-difference gradient checks, naive-versus-optimized differential
//! tests, the MAC-count model and report formats.

mod gradcheck;
mod invariants;
mod macs;
mod oracle;

pub use gradcheck::{
    check_emim, check_global, check_model, check_parameters, finite_diff_grad, grad_dims, grad_model, grad_suite,
    relative_error, GradCheckReport, ParamCheck, DEFAULT_GRAD_TOLERANCE, DEFAULT_STEP, NEGLIGIBLE,
};
pub use invariants::{
    check_ablation_identity, check_mac_model, check_normalization, check_patterns, check_translation_recovery, invariant_suite,
    InvariantCheck, InvariantReport,
};
pub use macs::{instrumented_count, mac_cases, mac_count, MacCase, MacModel, Mechanism};
pub use oracle::{
    oracle_equivalence, replay, run_case, trial_seed, OracleCase, OracleReport, OracleTrial, DEFAULT_ORACLE_TOLERANCE,
    NORMALIZATION_TOLERANCE,
};
