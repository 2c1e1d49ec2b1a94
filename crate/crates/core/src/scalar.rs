//! Scalar abstraction for the similarity and scoring kernels.
//!
//! Everything that produces a similarity, a retrieval score, an edge weight
//! or a utility is generic over [`Scalar`]. The runtime itself instantiates
//! the kernels at `f64` (see the aliases in the crate root); `f32` is
//! supported for callers that want compact embeddings.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64` constants.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("scalar conversion from f64")
    }

    /// Ratio of two counts.
    fn ratio(num: usize, den: usize) -> Self {
        if den == 0 {
            return Self::zero();
        }
        Self::from_usize(num).expect("count fits scalar") / Self::from_usize(den).expect("count fits scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Clamps into the closed unit interval. NaN maps to zero.
pub fn unit<T: Scalar>(value: T) -> T {
    if value.is_nan() {
        T::zero()
    } else {
        value.max(T::zero()).min(T::one())
    }
}
