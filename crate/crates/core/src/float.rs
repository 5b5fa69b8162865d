//! Scalar abstraction for the kernel and plan math.
//!
//! All closed-form recursions are written against [`Float`] so they work at
//! `f32` or `f64`; the Monte-Carlo lab pins `f64` (see [`crate::lab`]).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;

/// Floating-point scalar usable throughout the kernel recursions.
pub trait Float:
    num_traits::Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Error function, needed for the exact GELU form.
    fn erf(self) -> Self;

    /// One draw from the standard normal distribution.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Lossless-enough conversion from `f64` for constants and quadrature nodes.
    fn cast(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Float")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Float converts to f64")
    }
}

impl Float for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
}

impl Float for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
}
