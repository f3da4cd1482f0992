//! Element types for tensors.
//!
//! Training runs in `f32`; gradient checks run in `f64` where central
//! finite differences are trustworthy.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, NumCast};
use rand::Rng;
use rand_distr::StandardNormal;

/// Real element type usable as tensor data.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoint directories.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 -> scalar cast")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar -> f64 cast")
    }

    /// One standard-normal draw.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One uniform draw in `[0, 1)`.
    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen()
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen()
    }
}
