//! Scalar abstraction: the whole pipeline is generic over `f32`/`f64`.

use std::fmt::{Debug, Display};

/// Floating-point scalar the tensor core is generic over.
///
/// `f32` is the pipeline default (all persisted artifacts are single
/// precision); `f64` instantiations are used by gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + num_traits::Signed
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant not representable")
    }

    fn to_f64_c(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar not representable as f64")
    }

    fn to_f32_c(self) -> f32 {
        num_traits::ToPrimitive::to_f32(&self).expect("scalar not representable as f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lifting an `f64` literal into the generic scalar type.
pub fn s<S: Scalar>(x: f64) -> S {
    S::from_f64_c(x)
}
