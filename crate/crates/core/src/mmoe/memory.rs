use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Per-task feature memory for one forward pass. Slots start uninitialized;
/// the first placement initializes them and later placements accumulate
/// with a learnable momentum.
#[derive(Clone, Debug)]
pub struct TaskMemory {
    slots: Vec<Option<Var>>,
}

impl TaskMemory {
    pub fn new(tasks: usize) -> Self {
        Self {
            slots: vec![None; tasks],
        }
    }

    pub fn tasks(&self) -> usize {
        self.slots.len()
    }

    pub fn get(&self, task: usize) -> Option<Var> {
        self.slots[task]
    }

    pub fn is_initialized(&self, task: usize) -> bool {
        self.slots[task].is_some()
    }

    /// `M ← F` when `alpha` is `None` (first write), else `M ← F + α·M_prev`.
    pub fn write(&mut self, g: &mut Graph, task: usize, feature: Var, alpha: Option<Var>) -> Result<Var> {
        let slot = self
            .slots
            .get_mut(task)
            .ok_or_else(|| Error::Contract(format!("task {task} has no memory slot")))?;
        let next = match (alpha, *slot) {
            (None, None) => feature,
            (Some(a), Some(prev)) => {
                let decayed = g.scale_by(prev, a)?;
                g.add(feature, decayed)?
            }
            (None, Some(_)) => {
                return Err(Error::State(format!("memory slot {task} is already initialized")));
            }
            (Some(_), None) => {
                return Err(Error::State(format!(
                    "memory slot {task} written with momentum before initialization"
                )));
            }
        };
        *slot = Some(next);
        Ok(next)
    }
}

/// Value form of the memory write.
pub fn memory_write(prev: Option<&Tensor>, feature: &Tensor, alpha: Option<f64>) -> Result<Tensor> {
    match (prev, alpha) {
        (None, None) => Ok(feature.clone()),
        (Some(prev), Some(a)) => {
            if prev.shape() != feature.shape() {
                return Err(Error::shape("memory_write", prev.shape(), feature.shape()));
            }
            let data = feature.data().iter().zip(prev.data()).map(|(f, m)| f + a * m).collect();
            Tensor::new(feature.shape().to_vec(), data)
        }
        (Some(_), None) => Err(Error::State("memory already initialized".into())),
        (None, Some(_)) => Err(Error::State("momentum write before initialization".into())),
    }
}
