//! Scalar abstraction for the numeric core.
//!
//! All tensor arithmetic is generic over [`Scalar`]; the crate root pins
//! concrete `f64` aliases that the model, training, and evaluation layers use.

use std::fmt::{Debug, Display};

/// Floating-point scalar usable by the tensor and tape machinery.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal (constants, guards, seeds).
    fn from_f64_lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    /// Lossless widening to `f64` for reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
