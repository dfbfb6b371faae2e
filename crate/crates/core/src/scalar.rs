use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating point scalar used by probability maps and metrics: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("literal representable")
    }

    fn from_count(n: usize) -> Self {
        <Self as NumCast>::from(n).expect("count representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Ratio of two counts, with `0/0` defined as one.
pub(crate) fn ratio_or_one<T: Scalar>(num: usize, den: usize) -> T {
    if den == 0 {
        T::one()
    } else {
        T::from_count(num) / T::from_count(den)
    }
}
