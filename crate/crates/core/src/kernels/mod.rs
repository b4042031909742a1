//! Multiplication-free ternary kernels and their dense references.
//!
//! A ternary operand is a code matrix in `{-1, 0, +1}` with one scale per
//! group of rows. Ternary kernels add, subtract, or skip inputs according to
//! the codes and apply the scale once per output element:
//! `y = alpha * (sum_{c=+1} x - sum_{c=-1} x) + bias`.
//!
//! Scaling at the output instead of pre-scaling the input is equivalent and
//! needs one multiply per output rather than one per input.
//!
//! Convolutions treat out-of-bounds input (zero padding) as the value `0.0`
//! and still visit it, so the direct and im2col variants, and the dense
//! reference and the blocked GEMM, perform identical floating-point
//! operations in identical order.

mod bench;
mod counter;
pub mod gemm;
mod geometry;
mod reference;
mod ternary;

use thiserror::Error;

pub use bench::{bench, BenchKernel, BenchResult, BENCH_CSV_HEADER};
pub use counter::{NoCount, OpCounter, OpCounts};
pub use geometry::{col2im, im2col, ConvGeometry};
pub use reference::{reference_conv2d, reference_dot, reference_matmul};
pub use ternary::{
    ternary_conv2d, ternary_conv2d_im2col, ternary_dot, ternary_matmul, SignedRows,
    TernaryOperandView, TernaryWeights,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid convolution geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid scale grouping: {0}")]
    InvalidGrouping(String),
}
