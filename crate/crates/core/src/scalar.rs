//! Scalar abstraction for the numeric core.
//!
//! All dense-network math is generic over [`Scalar`], which is satisfied by
//! `f32` and `f64`. The pipeline instantiates `f32` for speed; gradient
//! oracles instantiate `f64` for precision.

use ndarray::NdFloat;
use num_traits::FromPrimitive;

pub trait Scalar: NdFloat + FromPrimitive + Send + Sync + 'static {
    fn cast_from(x: f64) -> Self;
    fn cast_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn cast_from(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn cast_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn cast_from(x: f64) -> Self {
        x
    }
    #[inline]
    fn cast_f64(self) -> f64 {
        self
    }
}
