//! Forward kernels shared by the autodiff graph and by callers that only
//! need values. All matrices are row-major; convolutions work on token
//! layout `[batch * h * w, channels]`.

use ndarray::linalg::general_mat_mul;
use ndarray::ArrayView2;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `[m x k]` and `op(b)` is `[k x n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let a_view = if a_trans {
        ArrayView2::from_shape((k, m), a).expect("gemm lhs").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm lhs")
    };
    let b_view = if b_trans {
        ArrayView2::from_shape((n, k), b).expect("gemm rhs").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm rhs")
    };
    let mut c_view = ndarray::ArrayViewMut2::from_shape((m, n), c).expect("gemm out");
    general_mat_mul(1.0, &a_view, &b_view, beta, &mut c_view);
}

fn expect_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::InvalidShape(format!("{op} expects a matrix, got {other:?}"))),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_2d("matmul", a)?;
    let (k2, n) = expect_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    Tensor::new([m, n], out)
}

/// `x W + b` for `x: [N x Cin]`, `W: [Cin x Cout]`, `b: [Cout]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, cin) = expect_2d("linear", x)?;
    let (cin2, cout) = expect_2d("linear", w)?;
    if cin != cin2 {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    if b.len() != cout {
        return Err(Error::shape("linear bias", w.shape(), b.shape()));
    }
    let mut out = Vec::with_capacity(n * cout);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(n, cin, cout, x.data(), false, w.data(), false, 1.0, &mut out);
    Tensor::new([n, cout], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
pub(crate) fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

pub(crate) fn gelu_grad(v: f64) -> f64 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax along the last axis of a tensor viewed as `[rows x cols]`.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}

/// Softmax along an arbitrary axis.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidShape(format!(
            "softmax axis {axis} out of range for {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[base + j * inner];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                data[base + j * inner] = *b;
            }
        }
    }
    Ok(out)
}

/// Row-wise gated sum `out[n, :] = sum_j gates[n, j] * operands[j][n, :]`.
/// Entries with a false mask are skipped; the accumulation order is always
/// ascending `j`, so an all-true mask is bit-identical to no mask.
pub fn gate_combine(gates: &Tensor, operands: &[&Tensor], mask: Option<&[bool]>) -> Result<Tensor> {
    let (rows, j) = expect_2d("gate_combine", gates)?;
    if operands.len() != j {
        return Err(Error::Contract(format!(
            "gate has {j} columns but {} operands were supplied",
            operands.len()
        )));
    }
    let first = operands
        .first()
        .ok_or_else(|| Error::Contract("gate_combine needs at least one operand".into()))?;
    let (orows, c) = expect_2d("gate_combine", first)?;
    if orows != rows {
        return Err(Error::shape("gate_combine", gates.shape(), first.shape()));
    }
    if let Some(op) = operands.iter().find(|o| o.shape() != first.shape()) {
        return Err(Error::shape("gate_combine", first.shape(), op.shape()));
    }
    if let Some(m) = mask {
        if m.len() != rows * j {
            return Err(Error::shape("gate_combine mask", gates.shape(), &[m.len()]));
        }
    }
    let g = gates.data();
    let mut out = vec![0.0; rows * c];
    for n in 0..rows {
        let dst = &mut out[n * c..(n + 1) * c];
        for (jj, op) in operands.iter().enumerate() {
            if mask.is_some_and(|m| !m[n * j + jj]) {
                continue;
            }
            let gate = g[n * j + jj];
            for (d, r) in dst.iter_mut().zip(&op.data()[n * c..(n + 1) * c]) {
                *d += gate * r;
            }
        }
    }
    Tensor::new([rows, c], out)
}

/// Geometry of a same-padded, stride-1 convolution over a token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn check_kernel(kernel: usize) -> Result<()> {
        if kernel.is_multiple_of(2) {
            return Err(Error::UnsupportedKernel(kernel));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds token-layout input into `[rows x Cin*k*k]` with column index
/// `(ci * k + ky) * k + kx`, zero outside the grid.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (h, w, k, cin) = (g.height, g.width, g.kernel, g.in_channels);
    let pad = (k / 2) as isize;
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.rows() * plen];
    for b in 0..g.batch {
        for y in 0..h {
            for xx in 0..w {
                let row = (b * h + y) * w + xx;
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src_row = (b * h + sy as usize) * w + sx as usize;
                        let src = &x[src_row * cin..(src_row + 1) * cin];
                        for (ci, &v) in src.iter().enumerate() {
                            dst[(ci * k + ky) * k + kx] = v;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates column gradients back into token layout.
pub(crate) fn col2im(dcols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (h, w, k, cin) = (g.height, g.width, g.kernel, g.in_channels);
    let pad = (k / 2) as isize;
    let plen = g.patch_len();
    for b in 0..g.batch {
        for y in 0..h {
            for xx in 0..w {
                let row = (b * h + y) * w + xx;
                let src = &dcols[row * plen..(row + 1) * plen];
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst_row = (b * h + sy as usize) * w + sx as usize;
                        let dst = &mut dx[dst_row * cin..(dst_row + 1) * cin];
                        for (ci, d) in dst.iter_mut().enumerate() {
                            *d += src[(ci * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution in token layout. `kernels` is `[Cout x Cin x k x k]`.
/// Returns the output and, for `k > 1`, the unfolded input for reuse in backward.
pub(crate) fn conv_tokens(
    x: &[f64],
    kernels: &[f64],
    bias: &[f64],
    g: &ConvGeometry,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let rows = g.rows();
    let cols = (g.kernel > 1).then(|| im2col(x, g));
    let lhs = cols.as_deref().unwrap_or(x);
    let mut out = Vec::with_capacity(rows * g.out_channels);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    gemm(
        rows,
        g.patch_len(),
        g.out_channels,
        lhs,
        false,
        kernels,
        true,
        1.0,
        &mut out,
    );
    (out, cols)
}

/// Same-padded stride-1 cross-correlation on a `[C x H x W]` map.
pub fn conv2d(x: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *x.shape() else {
        return Err(Error::InvalidShape(format!("conv2d input must be C x H x W, got {:?}", x.shape())));
    };
    let [cout, cin, kh, kw] = *kernels.shape() else {
        return Err(Error::InvalidShape(format!(
            "conv2d kernels must be Cout x Cin x k x k, got {:?}",
            kernels.shape()
        )));
    };
    if kh != kw {
        return Err(Error::InvalidShape(format!("non-square kernel {kh}x{kw}")));
    }
    ConvGeometry::check_kernel(kh)?;
    if cin != c {
        return Err(Error::shape("conv2d", x.shape(), kernels.shape()));
    }
    if bias.len() != cout {
        return Err(Error::shape("conv2d bias", kernels.shape(), bias.shape()));
    }
    let tokens = chw_to_tokens(x.data(), c, h, w);
    let g = ConvGeometry {
        batch: 1,
        height: h,
        width: w,
        kernel: kh,
        in_channels: c,
        out_channels: cout,
    };
    let (out, _) = conv_tokens(&tokens, kernels.data(), bias.data(), &g);
    Tensor::new([cout, h, w], tokens_to_chw(&out, cout, h, w))
}

pub fn chw_to_tokens(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for p in 0..h * w {
            out[p * c + ci] = x[ci * h * w + p];
        }
    }
    out
}

pub fn tokens_to_chw(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for p in 0..h * w {
            out[ci * h * w + p] = x[p * c + ci];
        }
    }
    out
}

/// Per-column statistics over rows: (mean, biased variance).
pub(crate) fn column_stats(x: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; cols];
    for row in x.chunks(cols) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; cols];
    for row in x.chunks(cols) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    for s in &mut var {
        *s /= rows as f64;
    }
    (mean, var)
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average update with the unbiased batch variance.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], samples: usize) {
        let unbias = samples as f64 / (samples as f64 - 1.0);
        for (r, m) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch norm over the sample axis of `x: [S x C]`. In train mode the
/// running stats are updated in place.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &mut RunningStats,
    mode: Mode,
) -> Result<Tensor> {
    let (s, c) = expect_2d("batch_norm", x)?;
    if gamma.len() != c || beta.len() != c || state.mean.len() != c {
        return Err(Error::shape("batch_norm", x.shape(), gamma.shape()));
    }
    let (mean, var) = match mode {
        Mode::Train => {
            if s < 2 {
                return Err(Error::DegenerateBatch(s));
            }
            let (mean, var) = column_stats(x.data(), s, c);
            state.update(&mean, &var, s);
            (mean, var)
        }
        Mode::Eval => (state.mean.clone(), state.var.clone()),
    };
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for j in 0..c {
            let rstd = 1.0 / (var[j] + BN_EPS).sqrt();
            row[j] = (row[j] - mean[j]) * rstd * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random(shape: &[usize], r: &mut rng::Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        Tensor::new([m, n], out).unwrap()
    }

    fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, ks) = (k.shape()[0], k.shape()[2]);
        let pad = (ks / 2) as isize;
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b.data()[o];
                    for ci in 0..c {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += x.data()[(ci * h + sy as usize) * w + sx as usize]
                                        * k.data()[((o * c + ci) * ks + ky) * ks + kx];
                                }
                            }
                        }
                    }
                    out[(o * h + y) * w + xx] = acc;
                }
            }
        }
        Tensor::new([cout, h, w], out).unwrap()
    }

    #[test]
    fn linear_identity_and_bias_passthrough() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let y = linear(&x, &eye, &Tensor::zeros([2])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let zero = Tensor::zeros([2, 2]);
        let b = Tensor::new([2], vec![3.0, 4.0]).unwrap();
        assert_eq!(linear(&x, &zero, &b).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let err = linear(&Tensor::zeros([1, 3]), &Tensor::zeros([2, 2]), &Tensor::zeros([2]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn linear_matches_naive_matmul() {
        let mut r = rng::rng(11);
        for _ in 0..100 {
            let x = random(&[4, 8], &mut r);
            let w = random(&[8, 3], &mut r);
            let b = random(&[3], &mut r);
            let mut expected = naive_matmul(&x, &w);
            for row in expected.data_mut().chunks_mut(3) {
                for (v, bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
            assert!(linear(&x, &w, &b).unwrap().max_abs_diff(&expected) < 1e-12);
        }
    }

    #[test]
    fn conv_identity_and_constant_bias() {
        let mut r = rng::rng(2);
        let x = random(&[1, 5, 5], &mut r);
        let one = Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap();
        assert!(conv2d(&x, &one, &Tensor::zeros([1])).unwrap().bit_eq(&x));
        let zero = Tensor::zeros([1, 1, 3, 3]);
        let y = conv2d(&x, &zero, &Tensor::full([1], 5.0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let x = Tensor::zeros([1, 4, 4]);
        let k = Tensor::zeros([1, 1, 2, 2]);
        assert!(matches!(
            conv2d(&x, &k, &Tensor::zeros([1])),
            Err(Error::UnsupportedKernel(2))
        ));
    }

    #[test]
    fn conv_matches_naive_six_loop() {
        let mut r = rng::rng(5);
        for case in 0..100 {
            let ks = [1, 3, 5][case % 3];
            let x = random(&[2, 5, 5], &mut r);
            let k = random(&[3, 2, ks, ks], &mut r);
            let b = random(&[3], &mut r);
            let got = conv2d(&x, &k, &b).unwrap();
            assert!(got.max_abs_diff(&naive_conv(&x, &k, &b)) < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::new([1, 3], vec![0.0; 3]).unwrap());
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Tensor::new([1, 2], vec![10.0, 10.0 + 2f64.ln()]).unwrap());
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-12);
        let r = relu(&Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_on_inner_axis() {
        let x = Tensor::new([2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let s = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let sum: f64 = (0..3).map(|j| s.data()[o * 6 + j * 2 + i]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        assert!(softmax(&x, 3).is_err());
    }

    #[test]
    fn batch_norm_examples() {
        let gamma = Tensor::full([2], 1.0);
        let beta = Tensor::new([2], vec![0.5, -2.0]).unwrap();
        let x = Tensor::from_rows(&[vec![3.0, -1.0], vec![3.0, 1.0]]).unwrap();
        let mut st = RunningStats::new(2);
        let y = batch_norm(&x, &gamma, &beta, &mut st, Mode::Train).unwrap();
        // constant column collapses to beta
        assert_eq!(y.at(0, 0), 0.5);
        assert_eq!(y.at(1, 0), 0.5);
        // {-1, +1} is already standardized up to the epsilon floor
        let expected = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((y.at(0, 1) - (-2.0 - expected)).abs() < 1e-12);
        assert!((y.at(1, 1) - (-2.0 + expected)).abs() < 1e-12);
        assert!(matches!(
            batch_norm(&Tensor::zeros([1, 2]), &gamma, &beta, &mut st, Mode::Train),
            Err(Error::DegenerateBatch(1))
        ));
        // eval mode tolerates a single sample
        assert!(batch_norm(&Tensor::zeros([1, 2]), &gamma, &beta, &mut st, Mode::Eval).is_ok());
    }

    #[test]
    fn batch_norm_standardizes_columns() {
        let mut r = rng::rng(9);
        let x = random(&[16, 4], &mut r).map(|v| 10.0 * v + 1.5);
        let mut st = RunningStats::new(4);
        let y = batch_norm(&x, &Tensor::full([4], 1.0), &Tensor::zeros([4]), &mut st, Mode::Train)
            .unwrap();
        let (mean, var) = column_stats(y.data(), 16, 4);
        for (m, v) in mean.iter().zip(&var) {
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-6, "var {v}");
        }
        // running mean moved by momentum towards the batch mean
        assert!(st.mean.iter().all(|m| m.abs() > 0.0));
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for v in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(v + h) - gelu(v - h)) / (2.0 * h);
            assert!((fd - gelu_grad(v)).abs() < 1e-8);
        }
    }
}
