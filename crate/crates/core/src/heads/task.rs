use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Categorical { classes: usize },
    Regression { channels: usize },
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    L1,
    BinaryCrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    MeanIou,
    Rmse,
    MeanAngularError,
    MaxF,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::MeanIou => "miou",
            MetricKind::Rmse => "rmse",
            MetricKind::MeanAngularError => "merr",
            MetricKind::MaxF => "maxf",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::HigherBetter => 1.0,
            Direction::LowerBetter => -1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::HigherBetter => "higher",
            Direction::LowerBetter => "lower",
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "higher" => Ok(Direction::HigherBetter),
            "lower" => Ok(Direction::LowerBetter),
            other => Err(Error::Config(format!("unknown metric direction `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub loss: LossKind,
    pub weight: f64,
    pub metric: MetricKind,
    pub direction: Direction,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = matches!(
            (self.kind, self.loss),
            (TaskKind::Categorical { .. }, LossKind::CrossEntropy)
                | (TaskKind::Regression { .. }, LossKind::L1)
                | (TaskKind::Binary, LossKind::BinaryCrossEntropy)
        );
        if !ok {
            return Err(Error::Config(format!(
                "task {}: loss {:?} does not fit kind {:?}",
                self.name, self.loss, self.kind
            )));
        }
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(Error::Config(format!("task {}: weight must be positive", self.name)));
        }
        Ok(())
    }

    /// Output channels of the prediction head.
    pub fn outputs(&self) -> usize {
        match self.kind {
            TaskKind::Categorical { classes } => classes,
            TaskKind::Regression { channels } => channels,
            TaskKind::Binary => 1,
        }
    }
}

/// Tasks of the synthetic scene suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SceneTask {
    Semseg,
    Depth,
    Normal,
    Saliency,
}

impl SceneTask {
    pub const ALL: [SceneTask; 4] = [SceneTask::Semseg, SceneTask::Depth, SceneTask::Normal, SceneTask::Saliency];

    pub fn name(self) -> &'static str {
        match self {
            SceneTask::Semseg => "semseg",
            SceneTask::Depth => "depth",
            SceneTask::Normal => "normal",
            SceneTask::Saliency => "saliency",
        }
    }

    pub fn spec(self, classes: usize, weights: WeightPreset) -> TaskSpec {
        let (kind, loss, metric, direction) = match self {
            SceneTask::Semseg => (
                TaskKind::Categorical { classes },
                LossKind::CrossEntropy,
                MetricKind::MeanIou,
                Direction::HigherBetter,
            ),
            SceneTask::Depth => (
                TaskKind::Regression { channels: 1 },
                LossKind::L1,
                MetricKind::Rmse,
                Direction::LowerBetter,
            ),
            SceneTask::Normal => (
                TaskKind::Regression { channels: 3 },
                LossKind::L1,
                MetricKind::MeanAngularError,
                Direction::LowerBetter,
            ),
            SceneTask::Saliency => (
                TaskKind::Binary,
                LossKind::BinaryCrossEntropy,
                MetricKind::MaxF,
                Direction::HigherBetter,
            ),
        };
        TaskSpec {
            name: self.name().to_string(),
            kind,
            loss,
            weight: weights.weight(self),
            metric,
            direction,
        }
    }
}

impl fmt::Display for SceneTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SceneTask::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

/// Loss weighting across tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightPreset {
    /// Every task weighted 1.
    Uniform,
    /// Dense-prediction weights from the multi-task literature
    /// (semseg 1, depth 1, normal 10, saliency 5).
    Reference,
}

impl WeightPreset {
    pub fn weight(self, task: SceneTask) -> f64 {
        match (self, task) {
            (WeightPreset::Uniform, _) => 1.0,
            (WeightPreset::Reference, SceneTask::Semseg | SceneTask::Depth) => 1.0,
            (WeightPreset::Reference, SceneTask::Normal) => 10.0,
            (WeightPreset::Reference, SceneTask::Saliency) => 5.0,
        }
    }
}

impl fmt::Display for WeightPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightPreset::Uniform => "uniform",
            WeightPreset::Reference => "reference",
        })
    }
}

impl FromStr for WeightPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform" => Ok(WeightPreset::Uniform),
            "reference" => Ok(WeightPreset::Reference),
            other => Err(Error::Config(format!("unknown weight preset `{other}`"))),
        }
    }
}

/// Supervision for one task over a batch of tokens.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskTarget {
    /// Class per token; `None` is ignored.
    Labels(Vec<Option<usize>>),
    /// `[rows x channels]` regression targets.
    Values(Tensor),
    /// Binary target per token in {0, 1}.
    Binary(Vec<f64>),
}
