use crate::backbone::{linear_params, norm_params, GridShape};
use crate::error::{Error, Result};
use crate::numerics::params::xavier_uniform;
use crate::numerics::{Graph, Mode, ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;

/// 3x3 conv – BatchNorm – ReLU on the token grid, then a per-token linear layer.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub task: String,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub outputs: usize,
}

impl PredictionHead {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, task: &str, channels: usize, outputs: usize) -> Result<Self> {
        let name = format!("head.{task}");
        let c = channels;
        let conv_w = store.trainable(format!("{name}.conv.w"), xavier_uniform(rng, &[c, c, 3, 3], 9 * c, 9 * c))?;
        let conv_b = store.trainable(format!("{name}.conv.b"), Tensor::zeros([c]))?;
        let (bn_gamma, bn_beta) = norm_params(store, &format!("{name}.bn"), c)?;
        let bn_mean = store.buffer(format!("{name}.bn.running_mean"), Tensor::zeros([c]))?;
        let bn_var = store.buffer(format!("{name}.bn.running_var"), Tensor::full([c], 1.0))?;
        let (out_w, out_b) = linear_params(store, rng, &format!("{name}.out"), c, outputs)?;
        Ok(Self {
            task: task.to_string(),
            conv_w,
            conv_b,
            bn_gamma,
            bn_beta,
            bn_mean,
            bn_var,
            out_w,
            out_b,
            outputs,
        })
    }

    /// Per-token predictions `[rows x outputs]` from the final task feature.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feature: Option<Var>,
        grid: GridShape,
        mode: Mode,
    ) -> Result<Var> {
        let x = feature.ok_or_else(|| Error::State(format!("task feature for head `{}` is uninitialized", self.task)))?;
        let (w, b) = (g.param(store, self.conv_w), g.param(store, self.conv_b));
        let h = g.conv(x, w, b, grid.batch, grid.height, grid.width)?;
        let (gamma, beta) = (g.param(store, self.bn_gamma), g.param(store, self.bn_beta));
        let h = g.batch_norm(store, h, gamma, beta, self.bn_mean, self.bn_var, mode)?;
        let h = g.relu(h);
        let (w, b) = (g.param(store, self.out_w), g.param(store, self.out_b));
        g.linear(h, w, b)
    }
}
