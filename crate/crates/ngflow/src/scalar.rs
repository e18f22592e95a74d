//! Scalar abstraction for the numerical core.
//!
//! All core math is generic over [`Scalar`] so the same kernels run in `f32`
//! or `f64`. The experiment suite pins `f64` throughout (see the aliases at
//! the crate root); Gramians of near-dependent tangent directions are too
//! ill-conditioned for single precision.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by every module in this crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssignOps
        + Sum
        + Debug
        + Display
        + Serialize
        + DeserializeOwned
        + Send
        + Sync
        + 'static
{
}

/// Converts an `f64` constant into the working scalar type.
#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("constant not representable in scalar type")
}
