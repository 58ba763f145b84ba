//! Floating-point element abstraction.
//!
//! Training runs in f32; gradient-check and Fisher suites instantiate the
//! same code in f64, where finite-difference tolerances are meaningful.

use num_traits::Float;
use std::fmt::Debug;
use std::iter::Sum;

pub trait Scalar:
    Float + Debug + Default + Send + Sync + Sum + 'static
{
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
