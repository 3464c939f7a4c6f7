//! Multi-phase training orchestration with explicit freeze schedules.

pub mod freeze;
pub mod matrix;
pub mod phase;
pub mod runner;

pub use freeze::{FreezeSchedule, PhaseKind};
pub use matrix::{build_adaptation_experiment, partition_types, ExperimentCell, TestSpec, TrainSpec};
pub use phase::{
    batch_gradients, items_of, run_phase, run_phase_interrupted, run_phase_with_dir,
    split_loss, EpochMetrics, PhaseConfig, PhaseOutcome, StepGrads,
};
pub use runner::{
    adapt_model, run_experiment_matrix, train_context_model, train_context_only_model,
    train_proxy_model, CellResult, MatrixInputs, TrainSetup,
};
