//! Synthetic tasks, bank construction, and the evaluation experiments.

mod eval;
mod suite;
mod synthetic;

pub use eval::{
    curves_svg, efficiency_curves, evaluate_loo, loo_prior, loo_projection, read_curves_csv,
    write_curves_csv, EfficiencyConfig, EfficiencyReport, LooReport, LooRow, Method, MethodCurve,
    PriorKind, RunRecord, TrialsToTarget,
};
pub use suite::{
    build_bank, normalize_by_initial, normalized_loss_feature, EvalCache, Suite, SuiteConfig,
};
pub use synthetic::{default_suite, generate_task, Generator, SyntheticTaskSpec};
