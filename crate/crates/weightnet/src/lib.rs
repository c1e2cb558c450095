//! Weight-generating (dynamic) convolutions — WeightNet(M, G, r), CondConv
//! and kernel-level squeeze-excitation — built on a minimal dense-tensor
//! reverse-mode autodiff engine, with a small training harness, parameter /
//! MAC accounting and per-sample weight analysis tools.
//!
//! The hot numeric loops (matmul, im2col convolution, batched kernel
//! application) run data-parallel over rayon when the default `parallel`
//! feature is enabled; building with `--no-default-features` selects the
//! sequential fallbacks. Both paths compute every output element with the
//! same summation order, so results are bitwise identical.

pub mod analysis;
pub mod complexity;
pub mod data;
pub mod dynconv;
pub mod error;
pub mod model;
pub mod nn;
pub mod ratio;
pub mod runner;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use ratio::Ratio;
pub use tensor::{NDTensor, Scalar, Tape};
