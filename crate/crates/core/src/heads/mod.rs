//! Task definitions, prediction heads, losses and evaluation metrics.

pub mod head;
pub mod loss;
pub mod metrics;
pub mod task;

pub use head::PredictionHead;
pub use loss::{task_loss, total_loss, weighted_total};
pub use metrics::{
    max_f_measure, mean_angular_error, miou, mtl_delta, rmse, AngularAccumulator, ConfusionMatrix, MaxFAccumulator,
    MetricRow, MetricTable, RmseAccumulator,
};
pub use task::{Direction, LossKind, MetricKind, SceneTask, TaskKind, TaskSpec, TaskTarget, WeightPreset};
