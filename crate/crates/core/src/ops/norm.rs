//! Layer normalization over the last axis.

use crate::error::{CoreError, Result};
use crate::tensor::{fl, Scalar, Tensor};

/// Per-row normalization to zero mean and unit (population) variance,
/// `eps` added inside the square root, then `gamma * xhat + beta`.
///
/// Returns the output plus the cached `(xhat, inv_std)` needed by the
/// backward pass.
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: f64,
) -> Result<(Tensor<F>, Tensor<F>, Vec<F>)> {
    let d = *x.shape().last().ok_or(CoreError::EmptyInput("layer_norm"))?;
    gamma.check_shape(&[d], "layer_norm gamma")?;
    beta.check_shape(&[d], "layer_norm beta")?;
    let rows = x.numel() / d;
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_stds = Vec::with_capacity(rows);
    let nd = fl::<F>(d as f64);
    let epsf = fl::<F>(eps);
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    {
        let yd = y.data_mut();
        let xh = xhat.data_mut();
        for r in 0..rows {
            let xr = &xd[r * d..(r + 1) * d];
            let mut mean = F::zero();
            for &v in xr {
                mean += v;
            }
            mean = mean / nd;
            let mut var = F::zero();
            for &v in xr {
                let c = v - mean;
                var += c * c;
            }
            var = var / nd;
            let inv_std = F::one() / (var + epsf).sqrt();
            inv_stds.push(inv_std);
            for i in 0..d {
                let h = (xr[i] - mean) * inv_std;
                xh[r * d + i] = h;
                yd[r * d + i] = gd[i] * h + bd[i];
            }
        }
    }
    Ok((y, xhat, inv_stds))
}

/// Gradients for `layer_norm`: returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<F: Scalar>(
    xhat: &Tensor<F>,
    inv_stds: &[F],
    gamma: &Tensor<F>,
    dy: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let d = gamma.dim(0);
    let rows = xhat.numel() / d;
    let mut dx = Tensor::zeros(xhat.shape());
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let nd = fl::<F>(d as f64);
    let xh = xhat.data();
    let gd = gamma.data();
    let dyd = dy.data();
    let dgd = dgamma.data_mut();
    let dbd = dbeta.data_mut();
    let dxd = dx.data_mut();
    for r in 0..rows {
        let xr = &xh[r * d..(r + 1) * d];
        let dyr = &dyd[r * d..(r + 1) * d];
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for i in 0..d {
            let dxhat = dyr[i] * gd[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xr[i];
            dgd[i] += dyr[i] * xr[i];
            dbd[i] += dyr[i];
        }
        let inv_std = inv_stds[r];
        for i in 0..d {
            let dxhat = dyr[i] * gd[i];
            dxd[r * d + i] =
                inv_std * (dxhat - sum_dxhat / nd - xr[i] * sum_dxhat_xhat / nd);
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{numeric_grad_scalar, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ones(d: usize) -> Tensor {
        Tensor::filled(&[d], 1.0)
    }

    #[test]
    fn constant_vector_normalizes_to_zero() {
        let x = Tensor::new(&[1, 1, 3], vec![5.0, 5.0, 5.0]).unwrap();
        let (y, _, _) = layer_norm(&x, &ones(3), &Tensor::zeros(&[3]), 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn already_normalized_is_fixed_point() {
        let x = Tensor::new(&[1, 1, 2], vec![-1.0, 1.0]).unwrap();
        let (y, _, _) = layer_norm(&x, &ones(2), &Tensor::zeros(&[2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 16;
        // Row variance must sit well above eps for the 1e-5 band to hold
        // (the eps inside the root biases variance by ~eps/var).
        let x = Tensor::from_fn(&[4, 2, d], |_| rng.gen_range(-5.0..5.0));
        let (y, _, _) = layer_norm(&x, &ones(d), &Tensor::zeros(&[d]), 1e-5).unwrap();
        for r in 0..8 {
            let row = &y.data()[r * d..(r + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() <= 1e-7);
            assert!((var - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 5;
        let x = Tensor::from_fn(&[2, 3, d], |_| rng.gen_range(-2.0..2.0));
        let gamma = Tensor::from_fn(&[d], |_| rng.gen_range(0.5..1.5));
        let beta = Tensor::from_fn(&[d], |_| rng.gen_range(-0.5..0.5));
        let coeff = Tensor::from_fn(&[2, 3, d], |i| ((i % 7) as f64 - 3.0) * 0.21);
        let loss = |x: &Tensor, g: &Tensor, b: &Tensor| {
            layer_norm(x, g, b, 1e-5).unwrap().0.mul(&coeff).unwrap().sum()
        };
        let (_, xhat, inv) = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        let (dx, dg, db) = layer_norm_backward(&xhat, &inv, &gamma, &coeff).unwrap();
        assert!(rel_err(&dx, &numeric_grad_scalar(&x, 1e-5, |t| loss(t, &gamma, &beta))) < 1e-6);
        assert!(rel_err(&dg, &numeric_grad_scalar(&gamma, 1e-5, |t| loss(&x, t, &beta))) < 1e-6);
        assert!(rel_err(&db, &numeric_grad_scalar(&beta, 1e-5, |t| loss(&x, &gamma, t))) < 1e-6);
    }
}
