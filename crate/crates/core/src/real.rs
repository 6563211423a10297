use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Floating-point storage type for tensors.
///
/// Training runs in `f32`; gradient checks run the same code in `f64`.
/// Reductions widen to `f64` regardless of the storage type.
pub trait Real: Float + Sum + Default + Debug + Display + Send + Sync + 'static {
    fn cast(x: f64) -> Self;
    fn wide(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn cast(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn wide(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn cast(x: f64) -> Self {
        x
    }

    #[inline]
    fn wide(self) -> f64 {
        self
    }
}
