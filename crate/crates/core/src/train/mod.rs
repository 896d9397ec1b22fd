//! Optimisation loop, checkpoints, gradient checking and the ablation
//! recipes.

mod ablation;
mod adam;
mod checkpoint;
mod config;
mod gradcheck;
mod trainer;

pub use ablation::{ablate_history, ablate_pnet, run_experiment, HistoryRow, HistoryTable, PnetRow, PnetTable, RunResult, PNET_GRID};
pub use adam::{adam_update, Adam};
pub use checkpoint::{peek_precision, Checkpoint, CheckpointMeta, MAGIC, VERSION};
pub use config::{HistoryMode, Precision, TrainConfig};
pub use gradcheck::{check_gradients, grad_check, linear_toy_check, GradCheckReport, FD_STEP, GRAD_CHECK_TOL};
pub use trainer::{
    BranchCounts, EpochLog, FitReport, StepStats, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE,
};
