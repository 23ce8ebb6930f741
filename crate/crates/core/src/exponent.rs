//! Integrability exponents in exact rational arithmetic.
//!
//! The exponent `sigma` with `1/sigma = 1/q - 1/p` is computed from rational
//! `p` and `q`, so the equal-exponent case is detected exactly rather than
//! through a floating point difference that happens to be tiny.

use std::fmt;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExponentError {
    #[error("exponent {0} is not a finite number >= 1 or infinity")]
    Invalid(f64),
    #[error("exponent {0} has no exact rational form with small denominator")]
    NotRational(f64),
    #[error("need q <= p, got q = {q}, p = {p}")]
    Order { p: Exponent, q: Exponent },
}

/// An exponent in `[1, inf]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exponent {
    Finite(Ratio<i64>),
    Infinite,
}

impl Exponent {
    pub fn integer(n: i64) -> Self {
        Exponent::Finite(Ratio::from_integer(n))
    }

    /// Reads an `f64`; `inf` maps to [`Exponent::Infinite`].
    pub fn from_f64(x: f64) -> Result<Self, ExponentError> {
        if x == f64::INFINITY {
            return Ok(Exponent::Infinite);
        }
        if !x.is_finite() || x < 1.0 {
            return Err(ExponentError::Invalid(x));
        }
        let r = Ratio::<i64>::approximate_float(x).ok_or(ExponentError::NotRational(x))?;
        if (r.to_f64().unwrap_or(f64::NAN) - x).abs() > 1e-12 * x || *r.denom() > 1_000_000 {
            return Err(ExponentError::NotRational(x));
        }
        Ok(Exponent::Finite(r))
    }

    pub fn to_f64(self) -> f64 {
        match self {
            Exponent::Finite(r) => r.to_f64().unwrap_or(f64::NAN),
            Exponent::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Exponent::Infinite)
    }

    /// `1 / self`, zero for infinity.
    pub fn reciprocal(self) -> Ratio<i64> {
        match self {
            Exponent::Finite(r) => r.recip(),
            Exponent::Infinite => Ratio::zero(),
        }
    }

    fn from_reciprocal(r: Ratio<i64>) -> Self {
        if r.is_zero() {
            Exponent::Infinite
        } else {
            Exponent::Finite(r.recip())
        }
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exponent::Finite(r) if r.is_integer() => write!(f, "{}", r.numer()),
            Exponent::Finite(r) => write!(f, "{}/{}", r.numer(), r.denom()),
            Exponent::Infinite => write!(f, "inf"),
        }
    }
}

/// `sigma` with `1/sigma = 1/q - 1/p`; infinite when `q = p`.
pub fn sigma(p: Exponent, q: Exponent) -> Result<Exponent, ExponentError> {
    let inv = q.reciprocal() - p.reciprocal();
    if inv < Ratio::zero() {
        return Err(ExponentError::Order { p, q });
    }
    Ok(Exponent::from_reciprocal(inv))
}

impl Serialize for Exponent {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Exponent::Finite(r) if r.is_integer() => s.serialize_i64(*r.numer()),
            Exponent::Finite(r) => s.serialize_f64(r.to_f64().unwrap_or(f64::NAN)),
            Exponent::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        let x = match Raw::deserialize(d)? {
            Raw::Num(x) => x,
            Raw::Str(s) if matches!(s.as_str(), "inf" | "infinity" | "Infinity") => f64::INFINITY,
            Raw::Str(s) => s.parse::<f64>().map_err(serde::de::Error::custom)?,
        };
        Exponent::from_f64(x).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_values() {
        let e = Exponent::integer;
        assert_eq!(sigma(e(8), e(4)).unwrap(), e(8));
        assert_eq!(sigma(e(4), e(4)).unwrap(), Exponent::Infinite);
        assert_eq!(sigma(Exponent::Infinite, e(3)).unwrap(), e(3));
        assert_eq!(sigma(e(3), e(2)).unwrap(), e(6));
        assert!(sigma(e(2), e(4)).is_err());
    }

    #[test]
    fn equal_fractional_exponents_are_exactly_equal() {
        let p = Exponent::from_f64(2.5).unwrap();
        let q = Exponent::from_f64(2.5).unwrap();
        assert_eq!(sigma(p, q).unwrap(), Exponent::Infinite);
    }

    #[test]
    fn parsing() {
        assert!(Exponent::from_f64(0.5).is_err());
        assert!(Exponent::from_f64(f64::NAN).is_err());
        let v: Exponent = serde_json::from_str("\"inf\"").unwrap();
        assert!(v.is_infinite());
        let v: Exponent = serde_json::from_str("4").unwrap();
        assert_eq!(v, Exponent::integer(4));
        assert_eq!(serde_json::to_string(&Exponent::integer(8)).unwrap(), "8");
    }
}
