use super::task::{LossKind, TaskSpec, TaskTarget};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

/// Mean loss of one task over its non-ignored tokens.
pub fn task_loss(g: &mut Graph, pred: Var, target: &TaskTarget, spec: &TaskSpec) -> Result<Var> {
    match (spec.loss, target) {
        (LossKind::CrossEntropy, TaskTarget::Labels(labels)) => g.cross_entropy(pred, labels),
        (LossKind::L1, TaskTarget::Values(values)) => g.l1(pred, values.clone()),
        (LossKind::BinaryCrossEntropy, TaskTarget::Binary(y)) => g.bce_with_logits(pred, y),
        (loss, _) => Err(Error::Contract(format!(
            "task {}: target does not fit loss {loss:?}",
            spec.name
        ))),
    }
}

/// `Σ_t weight_t · loss_t`.
pub fn total_loss(g: &mut Graph, losses: &[Var], specs: &[TaskSpec]) -> Result<Var> {
    if losses.len() != specs.len() {
        return Err(Error::Contract(format!(
            "{} task losses for {} tasks",
            losses.len(),
            specs.len()
        )));
    }
    let terms: Vec<(Var, f64)> = losses.iter().zip(specs).map(|(&l, s)| (l, s.weight)).collect();
    g.weighted_sum(&terms)
}

/// Value form of [`total_loss`].
pub fn weighted_total(losses: &[f64], specs: &[TaskSpec]) -> Result<f64> {
    if losses.len() != specs.len() {
        return Err(Error::Contract(format!(
            "{} task losses for {} tasks",
            losses.len(),
            specs.len()
        )));
    }
    Ok(losses.iter().zip(specs).map(|(l, s)| s.weight * l).sum())
}
