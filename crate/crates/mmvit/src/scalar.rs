//! Element types for tensors: f32 for training, f64 for verification mode.

use std::fmt::{Debug, Display};

/// Floating-point element of a [`crate::tensor::Tensor`].
///
/// The kit computes in `f32` and switches to `f64` when gradients are
/// being checked against finite differences, where f32 roundoff would
/// swamp the tolerances.
pub trait Scalar:
    num_traits::Float + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE_NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    // Named to avoid clashing with `ToPrimitive`'s Option-returning
    // methods, which ride in through the `Float` supertrait.
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    const DTYPE_NAME: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    const DTYPE_NAME: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}
