//! SiLU and softplus activations.

use crate::tensor::{Scalar, Tensor};

#[inline]
pub fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub fn silu_scalar<F: Scalar>(x: F) -> F {
    x * sigmoid_scalar(x)
}

/// Numerically stable softplus: `max(x, 0) + log1p(exp(-|x|))`.
#[inline]
pub fn softplus_scalar<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn silu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(silu_scalar)
}

pub fn softplus<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(softplus_scalar)
}

/// `d silu(x)/dx = sigma(x) * (1 + x * (1 - sigma(x)))`, times upstream.
pub fn silu_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = Tensor::zeros(x.shape());
    for ((o, &xi), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
        let s = sigmoid_scalar(xi);
        *o = g * s * (F::one() + xi * (F::one() - s));
    }
    dx
}

/// `d softplus(x)/dx = sigma(x)`, times upstream.
pub fn softplus_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = Tensor::zeros(x.shape());
    for ((o, &xi), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
        *o = g * sigmoid_scalar(xi);
    }
    dx
}
