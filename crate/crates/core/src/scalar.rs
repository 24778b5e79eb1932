//! Scalar abstraction: the numeric core is generic over the float type, with
//! `f64` as the default used by the CLI (and `f32` available for quick
//! experiments where precision is less of a concern).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point scalar usable throughout the numeric core.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Convert from `f64`, rounding as needed.
    fn from_f64(v: f64) -> Self;

    /// Widen to `f64`.
    fn into_f64(self) -> f64;

    /// Convert from `usize` (exact for the magnitudes used here).
    fn from_usize(v: usize) -> Self {
        <Self as Scalar>::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
}
