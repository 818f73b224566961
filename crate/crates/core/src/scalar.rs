//! Scalar traits.
//!
//! Marker expressions are any IEEE float ([`Marker`]). Probabilities in the
//! null machinery are [`Probability`], implemented for `f32`, `f64` and
//! exact [`BigRational`]; the exact instantiation is what lets the
//! conditional nulls be checked against enumeration without rounding.

use std::fmt::{Debug, Display};
use std::str::FromStr;

use num_rational::BigRational;
use num_traits::{Float, FromPrimitive, Num, ToPrimitive, Zero};

/// Floating point marker value: `f32` or `f64`.
pub trait Marker:
    Float + FromPrimitive + FromStr + Display + Debug + Default + Send + Sync + 'static
{
}

impl Marker for f32 {}
impl Marker for f64 {}

/// Arithmetic for probabilities and probability tables.
pub trait Probability:
    Num + Clone + PartialOrd + Debug + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Largest accepted |Σ pmf − 1| when validating a distribution.
    fn mass_tolerance() -> Self;

    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable")
    }

    /// Lossy conversion used for the `a_N` floor and for reporting.
    fn from_real(x: f64) -> Self {
        Self::from_f64(x).expect("finite real")
    }

    fn to_real(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn is_negative(&self) -> bool {
        *self < Self::zero()
    }
}

impl Probability for f32 {
    fn mass_tolerance() -> Self {
        1e-5
    }
}

impl Probability for f64 {
    fn mass_tolerance() -> Self {
        1e-12
    }
}

impl Probability for BigRational {
    fn mass_tolerance() -> Self {
        BigRational::zero()
    }
}
