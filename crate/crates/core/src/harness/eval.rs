use super::train::Trainer;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::heads::{
    weighted_total, AngularAccumulator, ConfusionMatrix, MaxFAccumulator, MetricKind, MetricTable, RmseAccumulator,
    TaskSpec, TaskTarget,
};
use crate::model::Model;
use crate::numerics::graph::sigmoid;
use crate::numerics::{Graph, Mode, ParamStore, Tensor};
use crate::synthdata::{Batch, SceneSample};

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub table: MetricTable,
    /// Per-task loss averaged over the split.
    pub task_losses: Vec<f64>,
    /// Weighted total of `task_losses`.
    pub total_loss: f64,
}

enum Accumulator {
    Miou(ConfusionMatrix),
    Rmse(RmseAccumulator),
    Angular(AngularAccumulator),
    MaxF(MaxFAccumulator),
}

impl Accumulator {
    fn new(spec: &TaskSpec) -> Self {
        match spec.metric {
            MetricKind::MeanIou => Accumulator::Miou(ConfusionMatrix::new(spec.outputs())),
            MetricKind::Rmse => Accumulator::Rmse(RmseAccumulator::default()),
            MetricKind::MeanAngularError => Accumulator::Angular(AngularAccumulator::default()),
            MetricKind::MaxF => Accumulator::MaxF(MaxFAccumulator::default()),
        }
    }

    fn update(&mut self, pred: &Tensor, target: &TaskTarget) -> Result<()> {
        match (self, target) {
            (Accumulator::Miou(cm), TaskTarget::Labels(gt)) => {
                let labels: Vec<usize> = (0..pred.rows())
                    .map(|r| {
                        let row = pred.row(r);
                        (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                    })
                    .collect();
                cm.update(&labels, gt)
            }
            (Accumulator::Rmse(acc), TaskTarget::Values(gt)) => acc.update(pred.data(), gt.data(), None),
            (Accumulator::Angular(acc), TaskTarget::Values(gt)) => acc.update(pred.data(), gt.data(), None),
            (Accumulator::MaxF(acc), TaskTarget::Binary(gt)) => {
                let probs: Vec<f64> = pred.data().iter().map(|&z| sigmoid(z)).collect();
                let gt: Vec<bool> = gt.iter().map(|&y| y > 0.5).collect();
                acc.update(&probs, &gt)
            }
            _ => Err(Error::Contract("target does not fit the task metric".into())),
        }
    }

    fn value(&self) -> Result<f64> {
        match self {
            Accumulator::Miou(cm) => cm.miou(),
            Accumulator::Rmse(acc) => acc.value(),
            Accumulator::Angular(acc) => acc.value(),
            Accumulator::MaxF(acc) => Ok(acc.value()),
        }
    }
}

/// Eval-mode metrics and losses over `samples`, in order, `batch_size` at a time.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    config: &RunConfig,
    samples: &[SceneSample],
    batch_size: usize,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let specs = model.tasks();
    let mut accs: Vec<Accumulator> = specs.iter().map(Accumulator::new).collect();
    let mut losses = vec![0.0; specs.len()];
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let batch = Batch::new(&refs, &config.tasks)?;
        let mut g = Graph::new();
        let terms = model.loss(&mut g, store, &batch.images, &batch.targets, Mode::Eval)?;
        let share = chunk.len() as f64 / samples.len() as f64;
        for (t, acc) in accs.iter_mut().enumerate() {
            losses[t] += share * g.value(terms.per_task[t]).item()?;
            acc.update(g.value(terms.predictions[t]), &batch.targets[t])?;
        }
    }
    let mut table = MetricTable::default();
    for (spec, acc) in specs.iter().zip(&accs) {
        table.push(spec, acc.value()?);
    }
    Ok(Evaluation {
        table,
        total_loss: weighted_total(&losses, specs)?,
        task_losses: losses,
    })
}

impl Trainer {
    pub fn evaluate_val(&self) -> Result<Evaluation> {
        evaluate(
            &self.model,
            &self.store,
            &self.config,
            &self.dataset.val,
            self.config.train.batch_size,
        )
    }
}

/// Config of the single-task model for task index `t` of `config`.
pub fn single_task_config(config: &RunConfig, t: usize) -> RunConfig {
    let mut c = config.clone();
    c.variant = crate::model::Variant::Baseline;
    c.gating.k_sel = None;
    c.gating.kernel = None;
    c.tasks = vec![config.tasks[t]];
    c.out = config.out.join(format!("single_{}", config.tasks[t].name()));
    c
}

/// Trains one single-task model per task and tabulates its validation metric.
pub fn train_single_task_baselines(
    config: &RunConfig,
    mut on_step: impl FnMut(&str, &super::StepLog),
) -> Result<MetricTable> {
    let mut table = MetricTable::default();
    let dataset = crate::synthdata::Dataset::generate(&config.dataset())?;
    for t in 0..config.tasks.len() {
        let cfg = single_task_config(config, t);
        let name = config.tasks[t].name();
        let mut trainer = Trainer::with_dataset(&cfg, dataset.clone())?;
        trainer.run_until(cfg.train.iterations, |_, step| {
            on_step(name, step);
            Ok(())
        })?;
        let eval = trainer.evaluate_val()?;
        table.rows.extend(eval.table.rows);
    }
    Ok(table)
}
