//! Scalar abstraction.
//!
//! Every numeric kernel in this crate is generic over a floating-point
//! scalar so the same code runs in f32 for speed or f64 for oracle-grade
//! precision. The trait is a thin bundle of the `num-traits` capabilities
//! the kernels actually use; it is implemented for exactly `f32` and `f64`.

use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + Sum<Self>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Pull an `f64` literal into the working scalar type.
pub fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}

/// Lossless-ish round trip out of the working scalar type (for stats and
/// serialization, which are pinned to f64).
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().expect("scalar convertible to f64")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cast_round_trips_for_both_scalar_types() {
        let a: f32 = cast(0.5);
        let b: f64 = cast(0.5);
        assert_eq!(a, 0.5f32);
        assert_eq!(b, 0.5f64);
        assert_eq!(to_f64(a), 0.5);
        assert_eq!(to_f64(b), 0.5);
    }
}
