//! Adam with decoupled weight decay and the polynomial learning-rate schedule.

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamKind, ParamStore, Tensor};

/// `lr0 · (1 − i / total)^power`.
pub fn poly_lr(lr0: f64, iteration: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = 1.0 - (iteration as f64 / total as f64).min(1.0);
    lr0 * frac.powf(power)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Moment estimates aligned with the store's ids; buffers keep empty slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |id| Tensor::zeros(store.get(id).shape().to_vec());
        let m: Vec<Tensor> = store.ids().map(zeros).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update: `p ← p − lr (m̂ / (√v̂ + ε) + wd · p)`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} entries, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if store.kind(id) == ParamKind::Buffer {
                continue;
            }
            let g = grads.get(id).data();
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let step = (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                p[k] -= lr * (step + weight_decay * p[k]);
            }
        }
        Ok(())
    }
}
