//! Affine map over the last axis.

use crate::error::{CoreError, Result};
use crate::tensor::{Scalar, Tensor};

/// `y[..., j] = sum_i x[..., i] * w[i, j] + bias[j]`.
///
/// Leading axes are flattened into rows, so the same op serves `[B,L,Din]`
/// and `[B,Din]` inputs.
pub fn linear<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    let din = *x.shape().last().ok_or(CoreError::EmptyInput("linear"))?;
    if w.rank() != 2 || w.dim(0) != din {
        return Err(CoreError::ShapeMismatch {
            op: "linear",
            expected: vec![din, w.rank().min(2).max(1)],
            found: w.shape().to_vec(),
        });
    }
    let dout = w.dim(1);
    if let Some(b) = bias {
        b.check_shape(&[dout], "linear bias")?;
    }
    let rows = x.numel() / din;
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = dout;
    let mut y = Tensor::zeros(&out_shape);
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    for r in 0..rows {
        let xr = &xd[r * din..(r + 1) * din];
        let yr = &mut yd[r * dout..(r + 1) * dout];
        if let Some(b) = bias {
            yr.copy_from_slice(b.data());
        }
        for (i, &xi) in xr.iter().enumerate() {
            let wr = &wd[i * dout..(i + 1) * dout];
            for (yv, &wv) in yr.iter_mut().zip(wr) {
                *yv += xi * wv;
            }
        }
    }
    Ok(y)
}

/// Gradients for `linear`: returns `(dx, dw, dbias)`.
pub fn linear_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    with_bias: bool,
) -> Result<(Tensor<F>, Tensor<F>, Option<Tensor<F>>)> {
    let din = w.dim(0);
    let dout = w.dim(1);
    let rows = x.numel() / din;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = if with_bias {
        Some(Tensor::zeros(&[dout]))
    } else {
        None
    };
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    {
        let dxd = dx.data_mut();
        for r in 0..rows {
            let dyr = &dyd[r * dout..(r + 1) * dout];
            let dxr = &mut dxd[r * din..(r + 1) * din];
            for i in 0..din {
                let wr = &wd[i * dout..(i + 1) * dout];
                let mut acc = F::zero();
                for (&g, &wv) in dyr.iter().zip(wr) {
                    acc += g * wv;
                }
                dxr[i] = acc;
            }
        }
    }
    {
        let dwd = dw.data_mut();
        for r in 0..rows {
            let xr = &xd[r * din..(r + 1) * din];
            let dyr = &dyd[r * dout..(r + 1) * dout];
            for (i, &xi) in xr.iter().enumerate() {
                let dwr = &mut dwd[i * dout..(i + 1) * dout];
                for (dwv, &g) in dwr.iter_mut().zip(dyr) {
                    *dwv += xi * g;
                }
            }
        }
    }
    if let Some(ref mut db) = db {
        let dbd = db.data_mut();
        for r in 0..rows {
            for (dbv, &g) in dbd.iter_mut().zip(&dyd[r * dout..(r + 1) * dout]) {
                *dbv += g;
            }
        }
    }
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{numeric_grad_scalar, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights() {
        let x = Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = linear(&x, &w, None).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let x = Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Tensor = Tensor::from_fn(&[1, 2, 3], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[3, 2], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[2], |_| rng.gen_range(-1.0..1.0));
        let y = linear(&x, &w, Some(&b)).unwrap();
        for bi in 0..1 {
            for l in 0..2 {
                for j in 0..2 {
                    let mut acc = b.data()[j];
                    for i in 0..3 {
                        acc += x.at3(bi, l, i) * w.at2(i, j);
                    }
                    assert!((y.at3(bi, l, j) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3]);
        let w = Tensor::<f64>::zeros(&[4, 2]);
        let msg = linear(&x, &w, None).unwrap_err().to_string();
        assert!(msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[4, 3], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[3], |_| rng.gen_range(-1.0..1.0));
        // Loss = weighted sum of outputs with fixed coefficients.
        let coeff = Tensor::from_fn(&[2, 3, 3], |i| ((i % 5) as f64 - 2.0) * 0.37);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| {
            linear(x, w, Some(b))
                .unwrap()
                .mul(&coeff)
                .unwrap()
                .sum()
        };
        let (dx, dw, db) = linear_backward(&x, &w, &coeff, true).unwrap();
        let ndx = numeric_grad_scalar(&x, 1e-5, |t| loss(t, &w, &b));
        let ndw = numeric_grad_scalar(&w, 1e-5, |t| loss(&x, t, &b));
        let ndb = numeric_grad_scalar(&b, 1e-5, |t| loss(&x, &w, t));
        assert!(rel_err(&dx, &ndx) < 1e-7);
        assert!(rel_err(&dw, &ndw) < 1e-7);
        assert!(rel_err(&db.unwrap(), &ndb) < 1e-7);
    }
}
