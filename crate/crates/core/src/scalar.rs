//! Floating-point abstraction shared by every numerical kernel.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar the surrogate math is written against. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal. Panics only if the target cannot hold it.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Logistic function, stable for large |x|.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of [`sigmoid`] with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn logit<T: Scalar>(p: T) -> T {
    let eps = T::lit(1e-7);
    let p = p.max(eps).min(T::one() - eps);
    (p / (T::one() - p)).ln()
}

/// Numerically stable softmax. Returns an empty vector for empty input.
pub fn softmax<T: Scalar>(xs: &[T]) -> Vec<T> {
    let Some(max) = xs.iter().copied().reduce(T::max) else {
        return Vec::new();
    };
    let mut out: Vec<T> = xs.iter().map(|&x| (x - max).exp()).collect();
    let z: T = out.iter().copied().sum();
    for o in &mut out {
        *o = *o / z;
    }
    out
}
