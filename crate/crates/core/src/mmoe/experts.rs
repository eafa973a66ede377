use crate::backbone::{linear_params, norm_params};
use crate::error::Result;
use crate::numerics::{Graph, Mode, ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;

/// Linear(C→C) – BatchNorm – ReLU – Linear(C→C).
///
/// Used for the experts and, with identical structure, for the per-task
/// decoders of the baseline model.
#[derive(Clone, Debug)]
pub struct ExpertNet {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl ExpertNet {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> Result<Self> {
        let (fc1_w, fc1_b) = linear_params(store, rng, &format!("{name}.fc1"), channels, channels)?;
        let (bn_gamma, bn_beta) = norm_params(store, &format!("{name}.bn"), channels)?;
        let bn_mean = store.buffer(format!("{name}.bn.running_mean"), Tensor::zeros([channels]))?;
        let bn_var = store.buffer(format!("{name}.bn.running_var"), Tensor::full([channels], 1.0))?;
        let (fc2_w, fc2_b) = linear_params(store, rng, &format!("{name}.fc2"), channels, channels)?;
        Ok(Self {
            fc1_w,
            fc1_b,
            bn_gamma,
            bn_beta,
            bn_mean,
            bn_var,
            fc2_w,
            fc2_b,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let (w, b) = (g.param(store, self.fc1_w), g.param(store, self.fc1_b));
        let h = g.linear(x, w, b)?;
        let (gamma, beta) = (g.param(store, self.bn_gamma), g.param(store, self.bn_beta));
        let h = g.batch_norm(store, h, gamma, beta, self.bn_mean, self.bn_var, mode)?;
        let h = g.relu(h);
        let (w, b) = (g.param(store, self.fc2_w), g.param(store, self.fc2_b));
        g.linear(h, w, b)
    }
}

/// The `K` experts attached to one backbone layer. Experts are shared by
/// all tasks; only gates and memory are task-specific.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub layer: usize,
    pub experts: Vec<ExpertNet>,
}

impl ExpertBank {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, layer: usize, experts: usize, channels: usize) -> Result<Self> {
        let experts = (0..experts)
            .map(|i| ExpertNet::new(store, rng, &format!("mmoe{layer}.expert{i}"), channels))
            .collect::<Result<_>>()?;
        Ok(Self { layer, experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Representative features `R_i = f_i(X)`, one per expert.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Vec<Var>> {
        self.experts.iter().map(|e| e.forward(g, store, x, mode)).collect()
    }
}
