//! Compression of trained classifier networks by feature-space reduction.
//!
//! The pipeline splits a network at a cut-off layer, projects the
//! intermediate features onto a low-rank subspace (POD or active
//! subspaces), replaces everything after the cut with a small surrogate
//! head (polynomial chaos expansion or a one-hidden-layer network), and
//! knowledge-distills the result against the original model.
//!
//! Numerical kernels are generic over [`scalar::Scalar`] (`f32`/`f64`);
//! the pipeline itself computes in `f64` and stores parameters on disk as
//! `f32`. The crate-root aliases below fix the default scalar.

pub mod data;
pub mod distill;
pub mod error;
pub mod format;
pub mod heads;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod reduce;
pub mod rng;
pub mod scalar;
pub mod split;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision tensor used by the pipeline.
pub type Tensor = tensor::Tensor<f64>;
/// Default-precision network; the generic form lives in [`nn`].
pub type Network = nn::Network<f64>;
/// Default-precision layer.
pub type Layer = nn::Layer<f64>;
/// SVD factorization at default precision.
pub type SvdResult = linalg::SvdResult<f64>;
/// Symmetric eigendecomposition at default precision.
pub type EigResult = linalg::EigResult<f64>;
