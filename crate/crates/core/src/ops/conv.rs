//! Depthwise causal 1-D convolution.

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Per-channel causal convolution: `y[b,t,e] = sum_j k[e,j] * x[b,t-j,e]`
/// with `k-1` implicit zeros of left padding, so output length equals input
/// length and position `t` sees only inputs at or before `t`. `k > L` is
/// permitted.
pub fn depthwise_conv1d_causal<F: Scalar>(x: &Tensor<F>, kernels: &Tensor<F>) -> Result<Tensor<F>> {
    let (b, l, e) = (x.dim(0), x.dim(1), x.dim(2));
    kernels.check_shape(&[e, kernels.dim(1)], "depthwise_conv1d kernels")?;
    let k = kernels.dim(1);
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let kd = kernels.data();
    let yd = y.data_mut();
    for bi in 0..b {
        for t in 0..l {
            let row = (bi * l + t) * e;
            for j in 0..k.min(t + 1) {
                let src = (bi * l + (t - j)) * e;
                for c in 0..e {
                    yd[row + c] += kd[c * k + j] * xd[src + c];
                }
            }
        }
    }
    Ok(y)
}

/// Gradients for the causal depthwise convolution: returns `(dx, dkernels)`.
pub fn depthwise_conv1d_causal_backward<F: Scalar>(
    x: &Tensor<F>,
    kernels: &Tensor<F>,
    dy: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (b, l, e) = (x.dim(0), x.dim(1), x.dim(2));
    let k = kernels.dim(1);
    let mut dx = Tensor::zeros(x.shape());
    let mut dk = Tensor::zeros(kernels.shape());
    let xd = x.data();
    let kd = kernels.data();
    let dyd = dy.data();
    {
        let dxd = dx.data_mut();
        for bi in 0..b {
            for t in 0..l {
                let row = (bi * l + t) * e;
                for j in 0..k.min(t + 1) {
                    let src = (bi * l + (t - j)) * e;
                    for c in 0..e {
                        dxd[src + c] += kd[c * k + j] * dyd[row + c];
                    }
                }
            }
        }
    }
    {
        let dkd = dk.data_mut();
        for bi in 0..b {
            for t in 0..l {
                let row = (bi * l + t) * e;
                for j in 0..k.min(t + 1) {
                    let src = (bi * l + (t - j)) * e;
                    for c in 0..e {
                        dkd[c * k + j] += xd[src + c] * dyd[row + c];
                    }
                }
            }
        }
    }
    Ok((dx, dk))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{numeric_grad_scalar, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel() {
        let x = Tensor::new(&[1, 4, 1], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let k = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let y = depthwise_conv1d_causal(&x, &k).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn shift_kernel() {
        let x = Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let y = depthwise_conv1d_causal(&x, &k).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn kernel_longer_than_sequence() {
        let x = Tensor::new(&[1, 2, 1], vec![1.0, 2.0]).unwrap();
        let k = Tensor::new(&[1, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let y = depthwise_conv1d_causal(&x, &k).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0]);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (b, l, e, k) = (2, 6, 3, 4);
        let x: Tensor = Tensor::from_fn(&[b, l, e], |_| rng.gen_range(-1.0..1.0));
        let ker = Tensor::from_fn(&[e, k], |_| rng.gen_range(-1.0..1.0));
        let y = depthwise_conv1d_causal(&x, &ker).unwrap();
        for bi in 0..b {
            for t in 0..l {
                for c in 0..e {
                    let mut acc = 0.0;
                    for j in 0..k {
                        if t >= j {
                            acc += ker.at2(c, j) * x.at3(bi, t - j, c);
                        }
                    }
                    assert!((y.at3(bi, t, c) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::from_fn(&[2, 5, 3], |_| rng.gen_range(-1.0..1.0));
        let ker = Tensor::from_fn(&[3, 3], |_| rng.gen_range(-1.0..1.0));
        let coeff = Tensor::from_fn(&[2, 5, 3], |i| ((i % 4) as f64 - 1.5) * 0.4);
        let loss = |x: &Tensor, k: &Tensor| {
            depthwise_conv1d_causal(x, k).unwrap().mul(&coeff).unwrap().sum()
        };
        let (dx, dk) = depthwise_conv1d_causal_backward(&x, &ker, &coeff).unwrap();
        assert!(rel_err(&dx, &numeric_grad_scalar(&x, 1e-5, |t| loss(t, &ker))) < 1e-7);
        assert!(rel_err(&dk, &numeric_grad_scalar(&ker, 1e-5, |t| loss(&x, t))) < 1e-7);
    }
}
