//! Scalar abstraction for tensor elements: f32 or f64.

use std::fmt;

/// Floating-point element type for [`crate::DenseTensor`].
///
/// Everything the tensor ops and naive kernels need: IEEE float math plus
/// casts to and from f64 for wide accumulation.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    /// Lossless widening for accumulator loops.
    fn widen(self) -> f64;
    /// Rounding narrow from the f64 accumulator back to the element type.
    fn narrow(v: f64) -> Self;
}

impl Scalar for f32 {
    fn widen(self) -> f64 {
        self as f64
    }
    fn narrow(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn widen(self) -> f64 {
        self
    }
    fn narrow(v: f64) -> Self {
        v
    }
}
