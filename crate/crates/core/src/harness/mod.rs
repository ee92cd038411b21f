//! Experiment protocol: synthetic tasks, evaluation, the two-stage sweep,
//! the four-condition pipeline, significance tests and reports.

pub mod eval;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod sweep;
pub mod task;

pub use eval::{evaluate, Contrastive, EvalResult, Generator, Greedy};
pub use pipeline::{
    difficulty_report, run_pipeline, run_seed, success_count, weak_model_ablation, AblationRecord, Condition,
    PerCondition, PipelineConfig, RunRecord, TercileRow,
};
pub use stats::{paired_t_test, TTestResult};
pub use sweep::{sweep, SweepGrid, SweepObjective, SweepOutcome};
pub use task::{gen_dataset, Splits, TaskKind, TaskSpec};
