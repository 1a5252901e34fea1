//! Scalar abstraction over the floating-point element type.
//!
//! Everything numeric in this crate is generic over [`Scalar`]. Production
//! code instantiates at `f32` (see the aliases at the crate root); the
//! finite-difference gradient oracle runs the same code at `f64` so that
//! rounding error in the check stays far below the tolerances it enforces.

use std::fmt;

use num_traits::{Float, NumAssignOps};

/// Floating-point element type for tensors, feature maps and images.
pub trait Scalar:
    Float + NumAssignOps + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Converts an `f64` constant, rounding to the nearest representable value.
    fn lit(v: f64) -> Self;

    /// Widens to `f64` exactly.
    fn wide(self) -> f64;

    /// Converts a count into the scalar type (exact for any realistic size).
    fn from_count(n: usize) -> Self {
        Self::lit(n as f64)
    }

    /// Narrows to the serialized `f32` form. For `f32` this is the identity
    /// and preserves every bit pattern, NaN payloads included; an `f64`
    /// detour would quiet signaling NaNs.
    fn to_stored(self) -> f32;

    /// Widens from the serialized `f32` form; the exact inverse of
    /// [`Scalar::to_stored`] for `f32`.
    fn from_stored(v: f32) -> Self;
}

impl Scalar for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }

    fn wide(self) -> f64 {
        self as f64
    }

    fn to_stored(self) -> f32 {
        self
    }

    fn from_stored(v: f32) -> Self {
        v
    }
}

impl Scalar for f64 {
    fn lit(v: f64) -> Self {
        v
    }

    fn wide(self) -> f64 {
        self
    }

    fn to_stored(self) -> f32 {
        self as f32
    }

    fn from_stored(v: f32) -> Self {
        v as f64
    }
}
