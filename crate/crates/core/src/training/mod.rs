//! Balanced subset training loop.

mod optim;
mod report;
mod scheduler;
mod step;

pub use optim::{clip_grad_norm, AdamW, OptimizerConfig};
pub use report::{convergence_report, spread, ConvergenceReport, CurvePoint};
pub use scheduler::{SchedulerMode, SubsetScheduler, DEFAULT_EMA_DECAY, DEFAULT_MIN_PROB};
pub use step::{
    batch_for_step, mmb_loss, subset_conditions, subset_nll, train_step, LossReport, StepRecord, TrainConfig, TrainState,
};
