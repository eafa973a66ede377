use crate::backbone::GridShape;
use crate::error::{Error, Result};
use crate::numerics::params::xavier_uniform;
use crate::numerics::{ConvGeometry, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;

/// Per-token mixture weights of one task at one layer: `[N x K]` at the
/// first placement, `[N x (K+1)]` afterwards (last column gates the memory).
#[derive(Clone, Debug, PartialEq)]
pub struct GateField {
    pub scores: Tensor,
    pub task: usize,
    pub layer: usize,
}

impl GateField {
    pub fn new(scores: Tensor, task: usize, layer: usize) -> Result<Self> {
        if scores.shape().len() != 2 {
            return Err(Error::InvalidShape(format!("gate field must be 2-D, got {:?}", scores.shape())));
        }
        Ok(Self { scores, task, layer })
    }

    pub fn columns(&self) -> usize {
        self.scores.cols()
    }

    /// Largest deviation of a row sum from 1, and whether all entries are nonnegative.
    pub fn normalization_error(&self) -> (f64, bool) {
        let mut worst = 0.0f64;
        let mut nonneg = true;
        for row in self.scores.data().chunks(self.columns()) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            nonneg &= row.iter().all(|&v| v >= 0.0);
        }
        (worst, nonneg)
    }
}

/// Task gating network: three convolution stages `C → C_hid → C_hid → J`
/// with ReLU between stages and a per-token softmax.
#[derive(Clone, Debug)]
pub struct GatingNet {
    pub layer: usize,
    pub task: usize,
    pub kernel: usize,
    pub outputs: usize,
    pub stages: [(ParamId, ParamId); 3],
}

fn conv_params(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> Result<(ParamId, ParamId)> {
    let w = xavier_uniform(rng, &[cout, cin, k, k], cin * k * k, cout * k * k);
    let w = store.trainable(format!("{name}.w"), w)?;
    let b = store.trainable(format!("{name}.b"), Tensor::zeros([cout]))?;
    Ok((w, b))
}

impl GatingNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        layer: usize,
        task: usize,
        channels: usize,
        hidden: usize,
        outputs: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("gating kernel size {kernel} must be odd")));
        }
        let s1 = conv_params(store, rng, &format!("{name}.conv1"), channels, hidden, kernel)?;
        let s2 = conv_params(store, rng, &format!("{name}.conv2"), hidden, hidden, kernel)?;
        let s3 = conv_params(store, rng, &format!("{name}.conv3"), hidden, outputs, kernel)?;
        Ok(Self {
            layer,
            task,
            kernel,
            outputs,
            stages: [s1, s2, s3],
        })
    }

    /// Pre-softmax scores, `[rows x outputs]`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var, grid: GridShape) -> Result<Var> {
        ConvGeometry::check_kernel(self.kernel)?;
        let mut h = x;
        for (i, &(w, b)) in self.stages.iter().enumerate() {
            let (w, b) = (g.param(store, w), g.param(store, b));
            h = g.conv(h, w, b, grid.batch, grid.height, grid.width)?;
            if i < 2 {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Gate scores: every row is a probability vector over the operands.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, grid: GridShape) -> Result<Var> {
        let logits = self.logits(g, store, x, grid)?;
        Ok(g.softmax(logits))
    }

    /// Value-only evaluation for a single sample's token grid.
    pub fn gate_field(&self, store: &ParamStore, tokens: &Tensor, height: usize, width: usize) -> Result<GateField> {
        let mut g = Graph::new();
        let x = g.input(tokens.clone());
        let grid = GridShape { batch: 1, height, width };
        let s = self.forward(&mut g, store, x, grid)?;
        GateField::new(g.value(s).clone(), self.task, self.layer)
    }
}
