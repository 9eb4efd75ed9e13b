//! duotrack-core: one differentiable tracking head for single- and
//! multi-object tracking, plus the training loop, online trackers,
//! metrics, synthetic data and the attention-complexity benchmark.
//!
//! All numeric kernels are generic over [`Scalar`] (f32 or f64); the
//! aliases at the crate root pin the common concrete choices.

pub mod autodiff;
pub mod geometry;
pub mod oracle;
pub mod scalar;

pub use scalar::{Dtype, Scalar};

/// Default evaluation/training precision.
pub type Real = f32;
/// Precision used by gradient checks and bit-exact resume tests.
pub type Checked = f64;

pub type GraphF32 = autodiff::Graph<f32>;
pub type GraphF64 = autodiff::Graph<f64>;
pub type BoxSetF32 = geometry::BoxSet<f32>;
pub type BoxSetF64 = geometry::BoxSet<f64>;
