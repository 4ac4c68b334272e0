//! Scalar abstraction shared by inference, bound propagation and the
//! differentiable margin evaluator.
//!
//! Every numeric routine in the crate is written once against [`Scalar`].
//! Plain `f64`/`f32` give ordinary evaluation; [`crate::autodiff::Var`]
//! records the same computation on a tape so gradients with respect to the
//! relaxation parameters come out of the identical code path.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumCast};

/// Floating-point scalar usable throughout the verifier.
pub trait Scalar: Float + FromPrimitive + Debug + Default + Send + Sync + 'static {
    /// Lift an `f64` constant.
    fn c(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 constant representable")
    }

    /// Primal value as `f64`.
    fn val(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert between scalar types through `f64`.
pub fn cast<S: Scalar, T: Scalar>(s: S) -> T {
    T::c(s.val())
}

/// `max(x, 0)` with a strict comparison, so the derivative at 0 is the
/// left limit (zero).
#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Larger of two values; ties resolve to `b`.
#[inline]
pub fn fmax<T: Scalar>(a: T, b: T) -> T {
    if a > b {
        a
    } else {
        b
    }
}

/// Smaller of two values; ties resolve to `b`.
#[inline]
pub fn fmin<T: Scalar>(a: T, b: T) -> T {
    if a < b {
        a
    } else {
        b
    }
}
