//! Experiment runner: training, evaluation, baselines, gate dumps and
//! gradient checks on top of the model and dataset modules.

pub mod checkpoint;
pub mod eval;
pub mod gates;
pub mod gradcheck;
pub mod train;

pub use checkpoint::{build_model, Checkpoint};
pub use eval::{evaluate, single_task_config, train_single_task_baselines, Evaluation};
pub use gates::{dump_gates, read_gate_csv, GateDump};
pub use gradcheck::{gradcheck_model, micro_config};
pub use train::{checkpoint_path, train, StepLog, TrainOptions, TrainOutcome, Trainer};
