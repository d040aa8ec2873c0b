//! Zero-order-hold discretization of the diagonal continuous system.
//!
//! Per (batch, position, channel, state): `a_bar = exp(delta * a)` and
//! `b_bar_x = (exp(delta * a) - 1) / a * b_in * x`. Small `|delta * a|`
//! switches to a series form to avoid cancellation.

use crate::error::{CoreError, Result};
use crate::tensor::{fl, Scalar, Tensor};

/// Threshold below which `(exp(z)-1)/a` and its derivatives use the
/// series expansion.
const SMALL_Z: f64 = 1e-4;

/// Continuous diagonal SSM parameters for one block.
///
/// `a` is `[E, N]` strictly negative; `delta` is `[B, L, E]` strictly
/// positive (post-softplus); `b_in` and `c_out` are the input/output
/// projections `[B, L, N]`.
#[derive(Debug, Clone)]
pub struct DiagSsmParams<F: Scalar = f64> {
    pub a: Tensor<F>,
    pub delta: Tensor<F>,
    pub b_in: Tensor<F>,
    pub c_out: Tensor<F>,
}

impl<F: Scalar> DiagSsmParams<F> {
    pub fn validate(&self) -> Result<()> {
        if self.a.data().iter().any(|&x| x >= F::zero()) {
            return Err(CoreError::ParameterDomain {
                op: "zoh_discretize",
                msg: "all entries of A must be strictly negative".into(),
            });
        }
        if self.delta.data().iter().any(|&x| x <= F::zero()) {
            return Err(CoreError::ParameterDomain {
                op: "zoh_discretize",
                msg: "all entries of delta must be strictly positive".into(),
            });
        }
        Ok(())
    }
}

/// Per-timestep transition and input factors, both `[B, L, E, N]`.
/// With `A < 0` and `delta > 0`, `0 < a_bar < 1` elementwise.
#[derive(Debug, Clone)]
pub struct DiscretizedFactors<F: Scalar = f64> {
    pub a_bar: Tensor<F>,
    pub b_bar_x: Tensor<F>,
}

/// Scalar ZOH pair: `(a_bar, phi)` where `phi = (exp(delta*a)-1)/a` so
/// that `b_bar_x = phi * b * x`. Handles `delta = 0` (boundary: `a_bar=1`,
/// `phi=0`) and the small-`|delta*a|` regime.
#[inline]
pub fn zoh_pair<F: Scalar>(a: F, delta: F) -> (F, F) {
    let z = delta * a;
    let a_bar = z.exp();
    let phi = if z.abs() < fl::<F>(SMALL_Z) {
        // phi = delta * (1 + z/2 + z^2/6)
        delta * (F::one() + z * fl::<F>(0.5) + z * z * fl::<F>(1.0 / 6.0))
    } else {
        (z.exp() - F::one()) / a
    };
    (a_bar, phi)
}

/// Derivatives of the scalar pair: `(d a_bar/d delta, d a_bar/d a,
/// d phi/d delta, d phi/d a)`.
#[inline]
pub fn zoh_pair_grad<F: Scalar>(a: F, delta: F) -> (F, F, F, F) {
    let z = delta * a;
    let ez = z.exp();
    let da_bar_ddelta = a * ez;
    let da_bar_da = delta * ez;
    let dphi_ddelta = ez;
    let dphi_da = if z.abs() < fl::<F>(SMALL_Z) {
        // (z e^z - expm1(z)) / a^2 = delta^2 (1/2 + z/3 + z^2/8)
        delta * delta * (fl::<F>(0.5) + z * fl::<F>(1.0 / 3.0) + z * z * fl::<F>(0.125))
    } else {
        (z * ez - (ez - F::one())) / (a * a)
    };
    (da_bar_ddelta, da_bar_da, dphi_ddelta, dphi_da)
}

/// Discretize: `x` is the input signal `[B, L, E]` that multiplies the
/// projected input factor. Validates the parameter domain first.
pub fn zoh_discretize<F: Scalar>(
    params: &DiagSsmParams<F>,
    x: &Tensor<F>,
) -> Result<DiscretizedFactors<F>> {
    params.validate()?;
    zoh_factors(&params.a, &params.delta, &params.b_in, x)
}

/// The raw factor computation, shared with the block forward pass (which
/// validates `A` and `delta` by construction).
pub fn zoh_factors<F: Scalar>(
    a: &Tensor<F>,
    delta: &Tensor<F>,
    b_in: &Tensor<F>,
    x: &Tensor<F>,
) -> Result<DiscretizedFactors<F>> {
    let (e, n) = (a.dim(0), a.dim(1));
    let (bs, l) = (delta.dim(0), delta.dim(1));
    delta.check_shape(&[bs, l, e], "zoh delta")?;
    b_in.check_shape(&[bs, l, n], "zoh b_in")?;
    x.check_shape(&[bs, l, e], "zoh input")?;
    let mut a_bar = Tensor::zeros(&[bs, l, e, n]);
    let mut bx = Tensor::zeros(&[bs, l, e, n]);
    let ad = a.data();
    let dd = delta.data();
    let bind = b_in.data();
    let xd = x.data();
    let abd = a_bar.data_mut();
    let bxd = bx.data_mut();
    for bl in 0..bs * l {
        for ei in 0..e {
            let dv = dd[bl * e + ei];
            let xv = xd[bl * e + ei];
            for ni in 0..n {
                let (ab, phi) = zoh_pair(ad[ei * n + ni], dv);
                let idx = (bl * e + ei) * n + ni;
                abd[idx] = ab;
                bxd[idx] = phi * bind[bl * n + ni] * xv;
            }
        }
    }
    Ok(DiscretizedFactors { a_bar, b_bar_x: bx })
}

/// Backward through `zoh_factors`: given upstream gradients for `a_bar`
/// and `b_bar_x`, returns `(da, ddelta, db_in, dx)`.
pub fn zoh_factors_backward<F: Scalar>(
    a: &Tensor<F>,
    delta: &Tensor<F>,
    b_in: &Tensor<F>,
    x: &Tensor<F>,
    d_a_bar: &Tensor<F>,
    d_bx: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (e, n) = (a.dim(0), a.dim(1));
    let (bs, l) = (delta.dim(0), delta.dim(1));
    let mut da = Tensor::zeros(&[e, n]);
    let mut ddelta = Tensor::zeros(&[bs, l, e]);
    let mut db_in = Tensor::zeros(&[bs, l, n]);
    let mut dx = Tensor::zeros(&[bs, l, e]);
    let ad = a.data();
    let dd = delta.data();
    let bind = b_in.data();
    let xd = x.data();
    let gab = d_a_bar.data();
    let gbx = d_bx.data();
    let dad = da.data_mut();
    let ddd = ddelta.data_mut();
    let dbd = db_in.data_mut();
    let dxd = dx.data_mut();
    for bl in 0..bs * l {
        for ei in 0..e {
            let dv = dd[bl * e + ei];
            let xv = xd[bl * e + ei];
            let mut acc_delta = F::zero();
            let mut acc_x = F::zero();
            for ni in 0..n {
                let av = ad[ei * n + ni];
                let bv = bind[bl * n + ni];
                let (_, phi) = zoh_pair(av, dv);
                let (dab_dd, dab_da, dphi_dd, dphi_da) = zoh_pair_grad(av, dv);
                let idx = (bl * e + ei) * n + ni;
                let g_ab = gab[idx];
                let g_bx = gbx[idx];
                acc_delta += g_ab * dab_dd + g_bx * dphi_dd * bv * xv;
                dad[ei * n + ni] += g_ab * dab_da + g_bx * dphi_da * bv * xv;
                dbd[bl * n + ni] += g_bx * phi * xv;
                acc_x += g_bx * phi * bv;
            }
            ddd[bl * e + ei] += acc_delta;
            dxd[bl * e + ei] += acc_x;
        }
    }
    Ok((da, ddelta, db_in, dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{numeric_grad_scalar, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_oracle_case() {
        // delta=0.1, a=-1, b=1, x=1.
        let (ab, phi) = zoh_pair(-1.0f64, 0.1);
        assert!((ab - (-0.1f64).exp()).abs() < 1e-15);
        let bx = phi * 1.0 * 1.0;
        assert!((bx - (1.0 - (-0.1f64).exp())).abs() < 1e-15);
        assert!((ab - 0.9048374).abs() < 1e-7);
        assert!((bx - 0.0951626).abs() < 1e-7);
    }

    #[test]
    fn small_a_limit_is_delta_b_x() {
        let (delta, b, x) = (0.3f64, 0.7, 1.9);
        let (_, phi) = zoh_pair(-1e-9, delta);
        let bx = phi * b * x;
        let limit = delta * b * x;
        assert!((bx - limit).abs() / limit.abs() < 1e-6);
    }

    #[test]
    fn zero_delta_boundary() {
        let (ab, phi) = zoh_pair(-2.0f64, 0.0);
        assert_eq!(ab, 1.0);
        assert_eq!(phi, 0.0);
    }

    #[test]
    fn series_branch_agrees_with_exact_form() {
        // Just inside the series branch, compare against the direct
        // expression evaluated in f64.
        let (a, d) = (-1.0f64, 0.99e-4);
        let (_, phi_series) = zoh_pair(a, d);
        let phi_exact = (d * a).exp_m1() / a;
        assert!((phi_series - phi_exact).abs() < 1e-16);
    }

    #[test]
    fn domain_validation() {
        let params = DiagSsmParams {
            a: Tensor::new(&[1, 1], vec![0.5]).unwrap(),
            delta: Tensor::filled(&[1, 1, 1], 0.1),
            b_in: Tensor::filled(&[1, 1, 1], 1.0),
            c_out: Tensor::filled(&[1, 1, 1], 1.0),
        };
        assert!(matches!(
            zoh_discretize(&params, &Tensor::filled(&[1, 1, 1], 1.0)),
            Err(CoreError::ParameterDomain { .. })
        ));
        let params = DiagSsmParams {
            a: Tensor::new(&[1, 1], vec![-0.5]).unwrap(),
            delta: Tensor::filled(&[1, 1, 1], -0.1),
            b_in: Tensor::filled(&[1, 1, 1], 1.0),
            c_out: Tensor::filled(&[1, 1, 1], 1.0),
        };
        assert!(zoh_discretize(&params, &Tensor::filled(&[1, 1, 1], 1.0)).is_err());
    }

    #[test]
    fn a_bar_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = Tensor::from_fn(&[3, 4], |_| -rng.gen_range(0.01..5.0));
        let delta = Tensor::from_fn(&[2, 5, 3], |_| rng.gen_range(0.001..1.0));
        let b_in = Tensor::from_fn(&[2, 5, 4], |_| rng.gen_range(-1.0..1.0));
        let x = Tensor::from_fn(&[2, 5, 3], |_| rng.gen_range(-1.0..1.0));
        let f = zoh_factors(&a, &delta, &b_in, &x).unwrap();
        for &v in f.a_bar.data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let a = Tensor::from_fn(&[2, 3], |_| -rng.gen_range(0.1..2.0));
        let delta = Tensor::from_fn(&[1, 4, 2], |_| rng.gen_range(0.01..0.5));
        let b_in = Tensor::from_fn(&[1, 4, 3], |_| rng.gen_range(-1.0..1.0));
        let x = Tensor::from_fn(&[1, 4, 2], |_| rng.gen_range(-1.0..1.0));
        let ca = Tensor::from_fn(&[1, 4, 2, 3], |i| ((i % 5) as f64 - 2.0) * 0.3);
        let cb = Tensor::from_fn(&[1, 4, 2, 3], |i| ((i % 3) as f64 - 1.0) * 0.5);
        let loss = |a: &Tensor, d: &Tensor, b: &Tensor, x: &Tensor| {
            let f = zoh_factors(a, d, b, x).unwrap();
            f.a_bar.mul(&ca).unwrap().sum() + f.b_bar_x.mul(&cb).unwrap().sum()
        };
        let (da, dd, db, dx) = zoh_factors_backward(&a, &delta, &b_in, &x, &ca, &cb).unwrap();
        assert!(rel_err(&da, &numeric_grad_scalar(&a, 1e-6, |t| loss(t, &delta, &b_in, &x))) < 1e-6);
        assert!(rel_err(&dd, &numeric_grad_scalar(&delta, 1e-6, |t| loss(&a, t, &b_in, &x))) < 1e-6);
        assert!(rel_err(&db, &numeric_grad_scalar(&b_in, 1e-6, |t| loss(&a, &delta, t, &x))) < 1e-6);
        assert!(rel_err(&dx, &numeric_grad_scalar(&x, 1e-6, |t| loss(&a, &delta, &b_in, t))) < 1e-6);
    }
}
