//! Few-shot one-class classification with a differentiable SVDD layer.
//!
//! An encoder maps a handful of target-class examples to features; the
//! Meta SVDD head finds the minimum enclosing ball of those features by
//! solving a small QP and differentiates through its solution, while the
//! one-class prototypical head uses the plain mean. Both heads are trained
//! episodically and evaluated with AUC and accuracy protocols against a
//! PCA + one-class SVM baseline.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the
//! training pipeline runs in `f64`.

pub mod autodiff;
pub mod baseline;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod qp;
pub mod scalar;
pub mod svdd;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Mat64 = linalg::Mat<f64>;
pub type Mat32 = linalg::Mat<f32>;
pub type KernelMatrix64 = svdd::KernelMatrix<f64>;
pub type DualSolution64 = svdd::DualSolution<f64>;
pub type DualSolution32 = svdd::DualSolution<f32>;
pub type OcsvmModel64 = baseline::OcsvmModel<f64>;
pub type PcaModel64 = baseline::PcaModel<f64>;
