//! Scalar abstraction: the library computes in `f32` by default; gradient
//! oracles run the same code in `f64`.

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub trait Real:
    Float
    + FromPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap()
    }
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

pub fn sigmoid<F: Real>(v: F) -> F {
    let one = F::one();
    if v >= F::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    }
}

/// v * sigmoid(v)
pub fn silu<F: Real>(v: F) -> F {
    v * sigmoid(v)
}

/// d/dv silu(v) = sigmoid(v) * (1 + v * (1 - sigmoid(v)))
pub fn silu_deriv<F: Real>(v: F) -> F {
    let s = sigmoid(v);
    s * (F::one() + v * (F::one() - s))
}

/// ln(1 + exp(v)), overflow-safe.
pub fn softplus<F: Real>(v: F) -> F {
    if v > F::of_f64(30.0) {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// d/dv softplus(v) = sigmoid(v)
pub fn softplus_deriv<F: Real>(v: F) -> F {
    sigmoid(v)
}
