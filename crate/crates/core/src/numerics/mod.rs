//! Dense `f64` tensors, forward kernels, a reverse-mode tape, and a
//! finite-difference gradient oracle.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradReport, ParamDeviation};
pub use graph::{Fault, Gradients, Graph, OpKind, StatUpdate, Var};
pub use kernels::{
    batch_norm, conv2d, gate_combine, linear, matmul, relu, softmax, softmax_rows, ConvGeometry,
    Mode, RunningStats,
};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
