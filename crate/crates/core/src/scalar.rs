//! Scalar abstraction for the numeric kernels.
//!
//! Everything downstream is generic over [`Real`], which bundles the
//! floating-point capabilities the algorithms rely on: `num_traits::Float`
//! arithmetic, assign operators, literal conversion, and `ndarray` scalar
//! broadcasting. `f32` and `f64` satisfy it out of the box; the crate root
//! exports `f64` aliases for the common types.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar usable by every kernel in this crate.
///
/// A blanket impl covers any type with the listed capabilities, so external
/// float types (half precision, wrappers) slot in without changes here.
pub trait Real:
    Float
    + NumAssign
    + FromPrimitive
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal into the scalar type.
    ///
    /// Panics if the type cannot represent ordinary finite literals; the
    /// provided impls (`f32`, `f64`) never do.
    fn of(x: f64) -> Self {
        Self::from(x).expect("literal not representable in scalar type")
    }

    /// Widens to `f64` for the double-precision special-function kernels and
    /// for formatting.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl<T> Real for T where
    T: Float
        + NumAssign
        + FromPrimitive
        + ScalarOperand
        + Sum
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}
