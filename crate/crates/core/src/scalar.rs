//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar: `f32` or `f64`.
///
/// Models, checkpoints and the CLI run on `f64`; `f32` is supported by the
/// math kernels for experimentation.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts a literal. Panics only if `x` is not representable, which
    /// cannot happen for finite `f64` literals on `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    // split by sign so exp never overflows
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `tanh` through a single `exp`, several times cheaper than the libm
/// routine; absolute error stays within a few ulp of 1.
#[inline]
pub(crate) fn tanh<T: Scalar>(x: T) -> T {
    let e = (T::lit(-2.0) * x.abs()).exp();
    let t = (T::one() - e) / (T::one() + e);
    if x < T::zero() {
        -t
    } else {
        t
    }
}
