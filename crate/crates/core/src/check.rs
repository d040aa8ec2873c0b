//! Central finite differences and comparison helpers, used by unit tests
//! and the `verify` command. Independent of every analytic backward pass.

use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function of one tensor.
pub fn numeric_grad_scalar(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

/// Max relative error between an analytic gradient and a numeric one,
/// normalized per element by `max(1, |a|, |b|)` so near-zero entries are
/// compared absolutely.
pub fn rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}
