//! A deliberately small reverse-mode autodiff engine.
//!
//! Tensors are dense, row-major and (for image ops) laid out as NCHW. A
//! [`Tape`] records every operation applied to [`Var`]s in creation order,
//! which is already a topological order, so [`Tape::backward`] is a single
//! reverse sweep. Matrix products go through `matrixmultiply`; everything
//! else is plain loops.
//!
//! Shape errors in this crate are programming errors and panic. Callers that
//! accept user data validate shapes before building a graph.

mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use kernels::{conv_out_size, gemm};
pub use scalar::Float;
pub use tape::{BatchNormMode, BatchNormOutput, Gradients, Tape, Var};
pub use tensor::Tensor;
