//! Scalar abstraction shared by the scoring and metric code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating point scalar: `f32` or `f64`.
///
/// Retrieval scores, similarity values and evaluation metrics are generic
/// over this trait. The pipeline itself runs on `f64` (see the aliases at
/// the crate root).
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from a count.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable as float")
    }

    /// Conversion from an `f64` literal or configuration value.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `numerator / denominator`, or zero when the denominator is zero.
pub fn ratio<T: Scalar>(numerator: usize, denominator: usize) -> T {
    if denominator == 0 {
        T::zero()
    } else {
        T::from_count(numerator) / T::from_count(denominator)
    }
}

/// Arithmetic mean, zero for an empty slice.
pub fn mean<T: Scalar>(values: &[T]) -> T {
    if values.is_empty() {
        return T::zero();
    }
    values.iter().copied().sum::<T>() / T::from_count(values.len())
}
