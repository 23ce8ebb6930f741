//! Scalar abstractions.
//!
//! Group arithmetic only needs a commutative ring with division by small
//! integers, so it is written against [`Scalar`], which exact rationals
//! satisfy. Everything metric or analytic (distances, quadrature,
//! differentiation) needs [`Real`], implemented by `f32` and `f64`.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::Neg;

use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

/// Field-like scalar used by the group law and Lie brackets.
pub trait Scalar:
    Copy + Num + Neg<Output = Self> + FromPrimitive + ToPrimitive + PartialOrd + Debug + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Copy + Num + Neg<Output = Self> + FromPrimitive + ToPrimitive + PartialOrd + Debug + Send + Sync + 'static
{
}

/// Floating point scalar: f32 or f64.
pub trait Real: Scalar + Float + Display + LowerExp + Sum + Default {}

impl<T> Real for T where T: Scalar + Float + Display + LowerExp + Sum + Default {}

/// Integer literal in any scalar type.
#[inline]
pub fn int<T: Scalar>(n: i64) -> T {
    T::from_i64(n).expect("integer literal representable in scalar type")
}

/// Floating literal converted into a real scalar.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in real type")
}

/// Lossy conversion to `f64` for reporting and tolerances.
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    fn half<T: Scalar>() -> T {
        T::one() / int::<T>(2)
    }

    #[test]
    fn rationals_are_scalars() {
        let h: Ratio<i64> = half();
        assert_eq!(h + h, Ratio::from_integer(1));
        assert_eq!(half::<f32>(), 0.5);
    }

    #[test]
    fn literals() {
        assert_eq!(lit::<f32>(0.25), 0.25f32);
        assert_eq!(to_f64(lit::<f64>(1.5)), 1.5);
    }
}
