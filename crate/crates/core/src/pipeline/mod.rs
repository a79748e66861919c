//! Training, evaluation, ablation studies and representation export.

pub mod check;
pub mod export;
pub mod metrics;
pub mod studies;
pub mod train;

pub use check::grad_check_model;
pub use export::{export_hidden, export_hidden_to, EXPORT_HEADER};
pub use metrics::{mean_std, Confusion, Metrics};
pub use studies::{
    ablate_relations, ablate_variants, ablate_variants_subset, run_repeats, subset_name, sweep_omega, variant_grid,
    RepeatReport, RunRecord, RunSummary, Table,
};
pub use train::{evaluate, plan_oversampling, train, train_prepared, EpochRecord, OversamplePlan, Prepared, TrainOutcome};
