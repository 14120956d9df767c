//! Scalar abstraction for the numeric kernels.
//!
//! The tensor container and the linear-algebra kernels are generic over the
//! floating-point type; the rest of the crate pins computation to `f64`
//! through the aliases at the crate root (weights are stored as `f32` on
//! disk, see [`crate::format`]).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Floating-point scalar usable in tensors and kernels.
pub trait Scalar:
    Float + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for literals and tolerances.
    fn from_f64(v: f64) -> Self;

    /// Lossy conversion to `f64`, used at serialization boundaries.
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}
