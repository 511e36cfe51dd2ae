//! Optimizer, learning-rate schedules, the synthetic task and the training
//! loops.

pub mod adam;
pub mod harness;
pub mod schedule;
pub mod synthetic;

pub use adam::Adam;
pub use harness::{
    draws_primary, evaluate, finetune, train, train_step, Condition, LogRecord, NoHooks, Prepared, TrainConfig,
    TrainHooks, TrainReport, TrainState,
};
pub use schedule::{FinetuneSpec, LrSchedule};
pub use synthetic::{make_finetune_task, make_synthetic_task, Layout, SyntheticAvTask, TaskSpec};
