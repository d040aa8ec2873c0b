//! L1 and cross-entropy losses, mean-reduced over the batch.

use crate::error::{CoreError, Result};
use crate::tensor::{fl, Scalar, Tensor};

/// Mean absolute error over all elements.
pub fn l1_loss<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<F> {
    pred.same_shape(target, "l1_loss")?;
    if pred.numel() == 0 {
        return Err(CoreError::EmptyInput("l1_loss"));
    }
    let n = fl::<F>(pred.numel() as f64);
    let mut acc = F::zero();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        acc += (p - t).abs();
    }
    Ok(acc / n)
}

/// Gradient of `l1_loss` with respect to `pred` (subgradient 0 at ties).
pub fn l1_loss_backward<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<Tensor<F>> {
    pred.same_shape(target, "l1_loss_backward")?;
    let n = fl::<F>(pred.numel() as f64);
    let mut g = Tensor::zeros(pred.shape());
    for ((o, &p), &t) in g.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        *o = if p > t {
            F::one() / n
        } else if p < t {
            -F::one() / n
        } else {
            F::zero()
        };
    }
    Ok(g)
}

/// Mean negative log-likelihood of `labels` under softmax of `logits[B,C]`,
/// computed with log-sum-exp stabilization.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<F> {
    let (b, c) = (logits.dim(0), logits.dim(1));
    if b == 0 {
        return Err(CoreError::EmptyInput("cross_entropy"));
    }
    if labels.len() != b {
        return Err(CoreError::ShapeMismatch {
            op: "cross_entropy",
            expected: vec![b],
            found: vec![labels.len()],
        });
    }
    let mut acc = F::zero();
    for (r, &lab) in labels.iter().enumerate() {
        let row = &logits.data()[r * c..(r + 1) * c];
        let m = row.iter().fold(F::neg_infinity(), |a, &x| a.max(x));
        let mut lse = F::zero();
        for &x in row {
            lse += (x - m).exp();
        }
        let lse = m + lse.ln();
        acc += lse - row[lab];
    }
    Ok(acc / fl::<F>(b as f64))
}

/// Gradient of `cross_entropy` with respect to the logits:
/// `(softmax - onehot) / B`.
pub fn cross_entropy_backward<F: Scalar>(
    logits: &Tensor<F>,
    labels: &[usize],
) -> Result<Tensor<F>> {
    let (b, c) = (logits.dim(0), logits.dim(1));
    let mut g = Tensor::zeros(logits.shape());
    let nb = fl::<F>(b as f64);
    for (r, &lab) in labels.iter().enumerate() {
        let row = &logits.data()[r * c..(r + 1) * c];
        let m = row.iter().fold(F::neg_infinity(), |a, &x| a.max(x));
        let mut z = F::zero();
        for &x in row {
            z += (x - m).exp();
        }
        let grow = &mut g.data_mut()[r * c..(r + 1) * c];
        for (i, &x) in row.iter().enumerate() {
            grow[i] = (x - m).exp() / z / nb;
        }
        grow[lab] = grow[lab] - F::one() / nb;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{numeric_grad_scalar, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l1_of_identical_inputs_is_zero() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(l1_loss(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        for c in [2usize, 3, 7] {
            let logits = Tensor::filled(&[4, c], 0.3);
            let labels = vec![0usize; 4];
            let loss = cross_entropy(&logits, &labels).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_stable_for_large_logits() {
        let logits: Tensor = Tensor::new(&[1, 2], vec![1000.0, -1000.0]).unwrap();
        assert!(cross_entropy(&logits, &[0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pred = Tensor::from_fn(&[6], |_| rng.gen_range(-2.0..2.0));
        let target = Tensor::from_fn(&[6], |_| rng.gen_range(-2.0..2.0));
        let g = l1_loss_backward(&pred, &target).unwrap();
        let ng = numeric_grad_scalar(&pred, 1e-6, |t| l1_loss(t, &target).unwrap());
        assert!(rel_err(&g, &ng) < 1e-5);

        let logits = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-2.0..2.0));
        let labels = vec![1usize, 3, 0];
        let g = cross_entropy_backward(&logits, &labels).unwrap();
        let ng = numeric_grad_scalar(&logits, 1e-5, |t| cross_entropy(t, &labels).unwrap());
        assert!(rel_err(&g, &ng) < 1e-5);
    }

    #[test]
    fn empty_input_rejected() {
        let x = Tensor::<f64>::zeros(&[0, 2]);
        assert!(cross_entropy(&x, &[]).is_err());
    }
}
