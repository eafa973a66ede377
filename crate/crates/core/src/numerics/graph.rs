//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and the backward sweep is a single reverse pass.

use std::collections::HashMap;

use super::kernels::{self, ConvGeometry, Mode, RunningStats, BN_EPS, LN_EPS};
use super::params::{ParamId, ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    Linear,
    Add,
    AddTiled,
    Mul,
    Scale,
    ScaleBy,
    Relu,
    Gelu,
    Softmax,
    LayerNorm,
    BatchNorm,
    Conv,
    Attention,
    GateCombine,
    Sum,
    Mean,
    WeightedSum,
    CrossEntropy,
    L1,
    BceLogits,
}

enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    AddTiled(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, train: bool },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeometry, cols: Option<Vec<f64>> },
    Attention { qkv: Var, batch: usize, tokens: usize, heads: usize, probs: Vec<f64> },
    GateCombine { gates: Var, operands: Vec<Var>, mask: Option<Vec<bool>> },
    Sum(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, f64)>),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    L1 { pred: Var, target: Tensor },
    BceLogits { logits: Var, targets: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add(..) => OpKind::Add,
            Op::AddTiled(..) => OpKind::AddTiled,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::ScaleBy(..) => OpKind::ScaleBy,
            Op::Relu(_) => OpKind::Relu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Conv { .. } => OpKind::Conv,
            Op::Attention { .. } => OpKind::Attention,
            Op::GateCombine { .. } => OpKind::GateCombine,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::WeightedSum(_) => OpKind::WeightedSum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::L1 { .. } => OpKind::L1,
            Op::BceLogits { .. } => OpKind::BceLogits,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Pending running-statistics update recorded by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub samples: usize,
}

impl StatUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let mut stats = RunningStats {
            mean: store.get(self.mean).data().to_vec(),
            var: store.get(self.var).data().to_vec(),
        };
        stats.update(&self.batch_mean, &self.batch_var, self.samples);
        store.get_mut(self.mean).data_mut().copy_from_slice(&stats.mean);
        store.get_mut(self.var).data_mut().copy_from_slice(&stats.var);
    }
}

/// Gradients for every entry of a [`ParamStore`], zero where unreachable.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }
}

/// Multiplies the input gradients produced by one op kind; used only to
/// build negative controls for gradient checks.
#[derive(Clone, Copy, Debug)]
pub struct Fault {
    pub kind: OpKind,
    pub scale: f64,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate>,
    fault: Option<Fault>,
}

fn shape_eq(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::InvalidShape(format!("{op} expects a matrix, got {other:?}"))),
    }
}

fn column_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in g.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Binds a stored parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.bound.insert(id, v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        shape_eq("add", self.value(a), self.value(b))?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `a + b` where `b`'s rows repeat down `a` (e.g. a positional table per sample).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() || ta.rows() % tb.rows() != 0 {
            return Err(Error::shape("add_tiled", ta.shape(), tb.shape()));
        }
        let mut value = ta.clone();
        let block = tb.len();
        for chunk in value.data_mut().chunks_mut(block) {
            for (v, p) in chunk.iter_mut().zip(tb.data()) {
                *v += p;
            }
        }
        Ok(self.push(value, Op::AddTiled(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        shape_eq("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    /// Multiplies `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let value = self.value(a).map(|v| v * sv);
        Ok(self.push(value, Op::ScaleBy(a, s)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = kernels::relu(self.value(a));
        self.push(value, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::gelu);
        self.push(value, Op::Gelu(a))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = kernels::softmax_rows(self.value(a));
        self.push(value, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = matrix("layer_norm", self.value(x))?;
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::shape("layer_norm", self.value(x).shape(), self.value(gamma).shape()));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new([rows, cols], out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Batch norm over the rows of `x`. Train mode normalizes with batch
    /// statistics and records a running-stat update; eval mode reads the
    /// running statistics from `store`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        mode: Mode,
    ) -> Result<Var> {
        let (rows, cols) = matrix("batch_norm", self.value(x))?;
        if self.value(gamma).len() != cols || store.get(running_mean).len() != cols {
            return Err(Error::shape("batch_norm", self.value(x).shape(), self.value(gamma).shape()));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::DegenerateBatch(rows));
                }
                let (mean, var) = kernels::column_stats(self.value(x).data(), rows, cols);
                self.stat_updates.push(StatUpdate {
                    mean: running_mean,
                    var: running_var,
                    batch_mean: mean.clone(),
                    batch_var: var.clone(),
                    samples: rows,
                });
                (mean, var)
            }
            Mode::Eval => (
                store.get(running_mean).data().to_vec(),
                store.get(running_var).data().to_vec(),
            ),
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                let h = (xv[i] - mean[c]) * rstd[c];
                xhat[i] = h;
                out[i] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new([rows, cols], out)?;
        let train = mode == Mode::Train;
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, rstd, train }))
    }

    /// Same-padded stride-1 convolution of a token-layout input
    /// `[batch*h*w x Cin]` with kernels `[Cout x Cin x k x k]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, batch: usize, height: usize, width: usize) -> Result<Var> {
        let wv = self.value(w);
        let [cout, cin, k, k2] = *wv.shape() else {
            return Err(Error::InvalidShape(format!("conv kernels must be 4-D, got {:?}", wv.shape())));
        };
        if k != k2 {
            return Err(Error::InvalidShape(format!("non-square kernel {k}x{k2}")));
        }
        ConvGeometry::check_kernel(k)?;
        let geom = ConvGeometry {
            batch,
            height,
            width,
            kernel: k,
            in_channels: cin,
            out_channels: cout,
        };
        let xv = self.value(x);
        if xv.shape() != [geom.rows(), cin] {
            return Err(Error::shape("conv", xv.shape(), &[geom.rows(), cin]));
        }
        if self.value(b).len() != cout {
            return Err(Error::shape("conv bias", wv.shape(), self.value(b).shape()));
        }
        let (out, cols) = kernels::conv_tokens(xv.data(), wv.data(), self.value(b).data(), &geom);
        let value = Tensor::new([geom.rows(), cout], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, geom, cols }))
    }

    /// Multi-head self-attention on packed `[q | k | v]` projections of
    /// shape `[batch*tokens x 3C]`; returns `[batch*tokens x C]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let (rows, three_c) = matrix("attention", self.value(qkv))?;
        if rows != batch * tokens || three_c % 3 != 0 || (three_c / 3) % heads != 0 {
            return Err(Error::InvalidShape(format!(
                "attention input {:?} incompatible with batch={batch} tokens={tokens} heads={heads}",
                self.value(qkv).shape()
            )));
        }
        let c = three_c / 3;
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![0.0; rows * c];
        let mut probs = vec![0.0; batch * heads * tokens * tokens];
        let mut q = vec![0.0; tokens * d];
        let mut k = vec![0.0; tokens * d];
        let mut v = vec![0.0; tokens * d];
        let mut o = vec![0.0; tokens * d];
        for bi in 0..batch {
            for h in 0..heads {
                gather_head(src, three_c, bi * tokens, tokens, h * d, d, &mut q);
                gather_head(src, three_c, bi * tokens, tokens, c + h * d, d, &mut k);
                gather_head(src, three_c, bi * tokens, tokens, 2 * c + h * d, d, &mut v);
                let p = &mut probs[(bi * heads + h) * tokens * tokens..][..tokens * tokens];
                kernels::gemm(tokens, d, tokens, &q, false, &k, true, 0.0, p);
                for row in p.chunks_mut(tokens) {
                    for s in row.iter_mut() {
                        *s *= scale;
                    }
                    kernels::softmax_in_place(row);
                }
                kernels::gemm(tokens, tokens, d, p, false, &v, false, 0.0, &mut o);
                scatter_head(&o, c, bi * tokens, tokens, h * d, d, &mut out);
            }
        }
        let value = Tensor::new([rows, c], out)?;
        Ok(self.push(value, Op::Attention { qkv, batch, tokens, heads, probs }))
    }

    /// Per-row weighted sum `out[n] = sum_j gates[n, j] * operands[j][n]`,
    /// skipping entries whose mask is false.
    pub fn gate_combine(&mut self, gates: Var, operands: &[Var], mask: Option<Vec<bool>>) -> Result<Var> {
        let g = self.value(gates);
        let ops: Vec<&Tensor> = operands.iter().map(|&v| self.value(v)).collect();
        let value = kernels::gate_combine(g, &ops, mask.as_deref())?;
        Ok(self.push(
            value,
            Op::GateCombine {
                gates,
                operands: operands.to_vec(),
                mask,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// `sum_i w_i * a_i` over same-shaped operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Contract("weighted_sum of zero terms".into()));
        };
        let mut value = Tensor::zeros(self.value(first).shape().to_vec());
        for &(v, w) in terms {
            let t = self.value(v);
            shape_eq("weighted_sum", &value, t)?;
            for (o, x) in value.data_mut().iter_mut().zip(t.data()) {
                *o += w * x;
            }
        }
        Ok(self.push(value, Op::WeightedSum(terms.to_vec())))
    }

    /// Mean cross-entropy of row-wise logits against class targets;
    /// `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, classes) = matrix("cross_entropy", self.value(logits))?;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", self.value(logits).shape(), &[targets.len()]));
        }
        let probs = kernels::softmax_rows(self.value(logits)).into_data();
        let lv = self.value(logits).data();
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= classes {
                return Err(Error::Contract(format!("target {t} out of range for {classes} classes")));
            }
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Mean absolute error against a constant target.
    pub fn l1(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        shape_eq("l1", self.value(pred), &target)?;
        let p = self.value(pred);
        let s: f64 = p.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
        let value = Tensor::scalar(s / p.len() as f64);
        Ok(self.push(value, Op::L1 { pred, target }))
    }

    /// Mean binary cross-entropy with logits against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", z.shape(), &[targets.len()]));
        }
        let s: f64 = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(s / z.len() as f64);
        Ok(self.push(
            value,
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// entry of `store`; entries off the path get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        let mut out: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Param(id) = node.op {
                if store.kind(id) == ParamKind::Trainable {
                    out[id.index()].add_assign(&dy);
                }
                continue;
            }
            let mut contributions = self.node_backward(node, &dy)?;
            if let Some(f) = self.fault {
                if f.kind == node.op.kind() {
                    for (_, g) in &mut contributions {
                        for v in g.data_mut() {
                            *v *= f.scale;
                        }
                    }
                }
            }
            for (v, g) in contributions {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn node_backward(&self, node: &Node, dy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data);
        Ok(match &node.op {
            Op::Input | Op::Param(_) => vec![],
            Op::Linear { x, w, b } => {
                let (n, cin) = (val(*x).rows(), val(*x).cols());
                let cout = val(*w).cols();
                let mut dx = vec![0.0; n * cin];
                kernels::gemm(n, cout, cin, dy.data(), false, val(*w).data(), true, 0.0, &mut dx);
                let mut dw = vec![0.0; cin * cout];
                kernels::gemm(cin, n, cout, val(*x).data(), true, dy.data(), false, 0.0, &mut dw);
                let db = column_sums(dy.data(), cout);
                vec![(*x, like(*x, dx)?), (*w, like(*w, dw)?), (*b, like(*b, db)?)]
            }
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::AddTiled(a, b) => {
                let block = val(*b).len();
                let mut db = vec![0.0; block];
                for chunk in dy.data().chunks(block) {
                    for (d, g) in db.iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
                vec![(*a, dy.clone()), (*b, like(*b, db)?)]
            }
            Op::Mul(a, b) => {
                let da = dy.data().iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                let db = dy.data().iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::Scale(a, c) => vec![(*a, dy.map(|g| g * c))],
            Op::ScaleBy(a, s) => {
                let sv = val(*s).data()[0];
                let ds: f64 = dy.data().iter().zip(val(*a).data()).map(|(g, x)| g * x).sum();
                vec![(*a, dy.map(|g| g * sv)), (*s, like(*s, vec![ds])?)]
            }
            Op::Relu(a) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, like(*a, d)?)]
            }
            Op::Gelu(a) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| g * kernels::gelu_grad(*x))
                    .collect();
                vec![(*a, like(*a, d)?)]
            }
            Op::Softmax(a) => {
                let cols = node.value.cols();
                let mut d = vec![0.0; dy.len()];
                for ((drow, yrow), grow) in d
                    .chunks_mut(cols)
                    .zip(node.value.data().chunks(cols))
                    .zip(dy.data().chunks(cols))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((dv, y), g) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = y * (g - dot);
                    }
                }
                vec![(*a, like(*a, d)?)]
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = val(*x).cols();
                let g = val(*gamma).data();
                let mut dx = vec![0.0; dy.len()];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for (r, grow) in dy.data().chunks(cols).enumerate() {
                    let h = &xhat[r * cols..(r + 1) * cols];
                    let mut sum = 0.0;
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dgamma[c] += grow[c] * h[c];
                        dbeta[c] += grow[c];
                        dxhat[c] = grow[c] * g[c];
                        sum += dxhat[c];
                        dot += dxhat[c] * h[c];
                    }
                    let n = cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = rstd[r] / n * (n * dxhat[c] - sum - h[c] * dot);
                    }
                }
                vec![
                    (*x, like(*x, dx)?),
                    (*gamma, like(*gamma, dgamma)?),
                    (*beta, like(*beta, dbeta)?),
                ]
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let (rows, cols) = (val(*x).rows(), val(*x).cols());
                let g = val(*gamma).data();
                let mut dgamma = vec![0.0; cols];
                let dbeta = column_sums(dy.data(), cols);
                for (r, grow) in dy.data().chunks(cols).enumerate() {
                    for c in 0..cols {
                        dgamma[c] += grow[c] * xhat[r * cols + c];
                    }
                }
                let mut dx = vec![0.0; rows * cols];
                if *train {
                    let n = rows as f64;
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            dx[i] = g[c] * rstd[c] / n * (n * dy.data()[i] - dbeta[c] - xhat[i] * dgamma[c]);
                        }
                    }
                } else {
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            dx[i] = dy.data()[i] * g[c] * rstd[c];
                        }
                    }
                }
                vec![
                    (*x, like(*x, dx)?),
                    (*gamma, like(*gamma, dgamma)?),
                    (*beta, like(*beta, dbeta)?),
                ]
            }
            Op::Conv { x, w, b, geom, cols } => {
                let rows = geom.rows();
                let plen = geom.patch_len();
                let cout = geom.out_channels;
                let lhs = cols.as_deref().unwrap_or(val(*x).data());
                let mut dw = vec![0.0; cout * plen];
                kernels::gemm(cout, rows, plen, dy.data(), true, lhs, false, 0.0, &mut dw);
                let db = column_sums(dy.data(), cout);
                let mut dcols = vec![0.0; rows * plen];
                kernels::gemm(rows, cout, plen, dy.data(), false, val(*w).data(), false, 0.0, &mut dcols);
                let dx = if geom.kernel == 1 {
                    dcols
                } else {
                    let mut dx = vec![0.0; rows * geom.in_channels];
                    kernels::col2im(&dcols, geom, &mut dx);
                    dx
                };
                vec![(*x, like(*x, dx)?), (*w, like(*w, dw)?), (*b, like(*b, db)?)]
            }
            Op::Attention { qkv, batch, tokens, heads, probs } => {
                let (batch, tokens, heads) = (*batch, *tokens, *heads);
                let three_c = val(*qkv).cols();
                let c = three_c / 3;
                let d = c / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let src = val(*qkv).data();
                let mut dqkv = vec![0.0; src.len()];
                let n2 = tokens * tokens;
                let mut q = vec![0.0; tokens * d];
                let mut k = vec![0.0; tokens * d];
                let mut v = vec![0.0; tokens * d];
                let mut dout = vec![0.0; tokens * d];
                let mut dp = vec![0.0; n2];
                let mut dq = vec![0.0; tokens * d];
                let mut dk = vec![0.0; tokens * d];
                let mut dv = vec![0.0; tokens * d];
                for bi in 0..batch {
                    for h in 0..heads {
                        let r0 = bi * tokens;
                        gather_head(src, three_c, r0, tokens, h * d, d, &mut q);
                        gather_head(src, three_c, r0, tokens, c + h * d, d, &mut k);
                        gather_head(src, three_c, r0, tokens, 2 * c + h * d, d, &mut v);
                        gather_head(dy.data(), c, r0, tokens, h * d, d, &mut dout);
                        let p = &probs[(bi * heads + h) * n2..][..n2];
                        kernels::gemm(tokens, tokens, d, p, true, &dout, false, 0.0, &mut dv);
                        kernels::gemm(tokens, d, tokens, &dout, false, &v, true, 0.0, &mut dp);
                        for (dprow, prow) in dp.chunks_mut(tokens).zip(p.chunks(tokens)) {
                            let dot: f64 = dprow.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for (ds, pv) in dprow.iter_mut().zip(prow) {
                                *ds = pv * (*ds - dot) * scale;
                            }
                        }
                        kernels::gemm(tokens, tokens, d, &dp, false, &k, false, 0.0, &mut dq);
                        kernels::gemm(tokens, tokens, d, &dp, true, &q, false, 0.0, &mut dk);
                        scatter_head(&dq, three_c, r0, tokens, h * d, d, &mut dqkv);
                        scatter_head(&dk, three_c, r0, tokens, c + h * d, d, &mut dqkv);
                        scatter_head(&dv, three_c, r0, tokens, 2 * c + h * d, d, &mut dqkv);
                    }
                }
                vec![(*qkv, like(*qkv, dqkv)?)]
            }
            Op::GateCombine { gates, operands, mask } => {
                let gv = val(*gates);
                let (rows, j) = (gv.rows(), gv.cols());
                let c = val(operands[0]).cols();
                let mut dg = vec![0.0; rows * j];
                let mut dops = vec![vec![0.0; rows * c]; j];
                for n in 0..rows {
                    let grow = &dy.data()[n * c..(n + 1) * c];
                    for (jj, dop) in dops.iter_mut().enumerate() {
                        if mask.as_ref().is_some_and(|m| !m[n * j + jj]) {
                            continue;
                        }
                        let gate = gv.data()[n * j + jj];
                        let r = &val(operands[jj]).data()[n * c..(n + 1) * c];
                        dg[n * j + jj] = grow.iter().zip(r).map(|(a, b)| a * b).sum();
                        for (d, g) in dop[n * c..(n + 1) * c].iter_mut().zip(grow) {
                            *d = gate * g;
                        }
                    }
                }
                let mut out = vec![(*gates, like(*gates, dg)?)];
                for (v, d) in operands.iter().zip(dops) {
                    out.push((*v, like(*v, d)?));
                }
                out
            }
            Op::Sum(a) => {
                let g = dy.data()[0];
                vec![(*a, Tensor::full(val(*a).shape().to_vec(), g))]
            }
            Op::Mean(a) => {
                let g = dy.data()[0] / val(*a).len() as f64;
                vec![(*a, Tensor::full(val(*a).shape().to_vec(), g))]
            }
            Op::WeightedSum(terms) => terms.iter().map(|&(v, w)| (v, dy.map(|g| g * w))).collect(),
            Op::CrossEntropy { logits, targets, probs, count } => {
                let classes = val(*logits).cols();
                let scale = dy.data()[0] / *count as f64;
                let mut d = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..classes {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        d[r * classes + c] = (probs[r * classes + c] - onehot) * scale;
                    }
                }
                vec![(*logits, like(*logits, d)?)]
            }
            Op::L1 { pred, target } => {
                let scale = dy.data()[0] / target.len() as f64;
                let d = val(*pred)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| {
                        let diff = p - t;
                        if diff > 0.0 {
                            scale
                        } else if diff < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(*pred, like(*pred, d)?)]
            }
            Op::BceLogits { logits, targets } => {
                let scale = dy.data()[0] / targets.len() as f64;
                let d = val(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(z, y)| (sigmoid(*z) - y) * scale)
                    .collect();
                vec![(*logits, like(*logits, d)?)]
            }
        })
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn gather_head(src: &[f64], stride: usize, row0: usize, rows: usize, col0: usize, width: usize, dst: &mut [f64]) {
    for r in 0..rows {
        let s = (row0 + r) * stride + col0;
        dst[r * width..(r + 1) * width].copy_from_slice(&src[s..s + width]);
    }
}

fn scatter_head(src: &[f64], stride: usize, row0: usize, rows: usize, col0: usize, width: usize, dst: &mut [f64]) {
    for r in 0..rows {
        let s = (row0 + r) * stride + col0;
        for (d, v) in dst[s..s + width].iter_mut().zip(&src[r * width..(r + 1) * width]) {
            *d += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut store = ParamStore::new();
        let id = store.trainable("x", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss, &store).unwrap();
        assert_eq!(grads.get(id).data(), &[6.0]);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut store = ParamStore::new();
        let id = store.trainable("x", Tensor::new([2], vec![-1.0, 2.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let r = g.relu(x);
        let loss = g.sum(r);
        let grads = g.backward(loss, &store).unwrap();
        assert_eq!(grads.get(id).data(), &[0.0, 1.0]);
    }

    #[test]
    fn unreachable_parameters_get_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.trainable("a", Tensor::scalar(2.0)).unwrap();
        let b = store.trainable("b", Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let loss = g.sum(av);
        let grads = g.backward(loss, &store).unwrap();
        assert_eq!(grads.get(b).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([2]));
        assert!(matches!(g.backward(x, &store), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_classes() {
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros([3, 4]));
        let l = g.cross_entropy(z, &[Some(0), Some(3), None]).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(g.cross_entropy(z, &[None, None, None]), Err(Error::EmptyLoss)));
    }

    #[test]
    fn cross_entropy_confident_logits_vanish() {
        let mut g = Graph::new();
        let z = g.input(Tensor::from_rows(&[vec![100.0, 0.0], vec![0.0, 100.0]]).unwrap());
        let l = g.cross_entropy(z, &[Some(0), Some(1)]).unwrap();
        assert!(g.value(l).data()[0] < 1e-40);
    }

    #[test]
    fn l1_of_identical_is_zero() {
        let mut g = Graph::new();
        let t = Tensor::new([2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let p = g.input(t.clone());
        let l = g.l1(p, t).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
    }
}
