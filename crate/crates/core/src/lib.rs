//! Ternary weight networks.
//!
//! - [`quantizer`]: exact and rule-of-thumb threshold solvers for
//!   `min ||W - alpha * W_t||^2` with `W_t` in `{-1, 0, +1}`, plus a brute-force
//!   oracle and the sign-binarization baseline.
//! - [`packfmt`]: 2-bit packed ternary tensors and the `.twn` model file.
//! - [`kernels`]: multiplication-free ternary dot/matmul/conv with dense
//!   reference kernels and op-count instrumentation.
//! - [`nn`], [`trainer`]: layers with straight-through ternary training and an
//!   SGD-with-momentum loop.
//! - [`data`]: MNIST IDX loading and synthetic datasets.

pub mod tensor;
pub mod quantizer;
pub mod kernels;
pub mod packfmt;
pub mod nn;
pub mod data;
pub mod trainer;
