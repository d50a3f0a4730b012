//! Floating-point abstraction: training runs in `f32`, verification in `f64`.

use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::Float;

/// Element type for all tensor computation.
pub trait Scalar: Float + Debug + Display + Copy + Sum + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;
    fn from_usize_(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64_(self) -> f64 {
        self
    }
}
