use std::fmt;

use num_traits::Float;

/// Element type for tensors: f64 wherever tolerances matter (oracles,
/// gradient checks), f32 on the training path and in the on-disk formats.
pub trait Scalar: Float + fmt::Debug + fmt::Display + Default + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}
