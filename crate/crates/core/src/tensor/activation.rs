use super::{Scalar, Tensor4};
use crate::error::Result;

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` where `x > 0`. `x` may be either the pre-activation or
/// the ReLU output; both have the same positive support.
pub fn relu_backward<T: Scalar>(x: &Tensor4<T>, upstream: &Tensor4<T>) -> Result<Tensor4<T>> {
    upstream.expect_shape(x.shape(), "relu upstream")?;
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(x.shape(), data)
}

/// Logistic function, evaluated so that neither tail overflows.
#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid)
}

/// Takes the sigmoid output `y`, not its input.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor4<T>, upstream: &Tensor4<T>) -> Result<Tensor4<T>> {
    upstream.expect_shape(y.shape(), "sigmoid upstream")?;
    let data = y
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor4::from_vec(y.shape(), data)
}
