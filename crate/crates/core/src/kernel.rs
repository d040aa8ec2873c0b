//! Global convolution kernel engines for the time-invariant case.
//!
//! When the discretized factors do not vary with time, the recurrence
//! unrolls into an impulse response `(C B, C A B, ..., C A^{L-1} B)` and
//! the output becomes a single causal convolution. Time-varying factors
//! are refused with a capability error pointing at the associative scan.

use crate::error::{CoreError, Result};
use crate::tensor::{Scalar, Tensor};

/// Extract the constant `[E, N]` factor from `[B, L, E, N]` input, or fail
/// if any timestep or batch differs.
pub fn require_time_invariant<F: Scalar>(
    factors: &Tensor<F>,
    engine: &'static str,
) -> Result<Tensor<F>> {
    let (bs, l, e, n) = (
        factors.dim(0),
        factors.dim(1),
        factors.dim(2),
        factors.dim(3),
    );
    let lane = e * n;
    let mut out = Tensor::zeros(&[e, n]);
    out.data_mut().copy_from_slice(&factors.data()[..lane]);
    for bi in 0..bs {
        for t in 0..l {
            let base = (bi * l + t) * lane;
            if factors.data()[base..base + lane] != *out.data() {
                return Err(CoreError::EngineCapability { engine });
            }
        }
    }
    Ok(out)
}

/// Build the global kernel `K[l, e] = sum_n c[n] * a^l[e,n] * b[e,n]`
/// for constant per-lane factors.
pub fn uncoupled_conv_kernel<F: Scalar>(
    a_bar: &Tensor<F>,
    b_bar: &Tensor<F>,
    c: &Tensor<F>,
    len: usize,
) -> Result<Tensor<F>> {
    let (e, n) = (a_bar.dim(0), a_bar.dim(1));
    a_bar.same_shape(b_bar, "uncoupled_conv_kernel")?;
    c.check_shape(&[n], "uncoupled_conv_kernel c")?;
    let mut kernel = Tensor::zeros(&[len, e]);
    let ad = a_bar.data();
    let bd = b_bar.data();
    let cd = c.data();
    let kd = kernel.data_mut();
    for ei in 0..e {
        // pow[n] tracks a^l per state lane.
        let mut pow = vec![F::one(); n];
        for l in 0..len {
            let mut acc = F::zero();
            for ni in 0..n {
                acc += cd[ni] * pow[ni] * bd[ei * n + ni];
                pow[ni] *= ad[ei * n + ni];
            }
            kd[l * e + ei] = acc;
        }
    }
    Ok(kernel)
}

/// Causal convolution of the input `x[B, L, E]` with a per-channel kernel
/// `K[L, E]`: `y[b,t,e] = sum_{i<=t} K[t-i, e] * x[b,i,e]`.
pub fn apply_causal_kernel<F: Scalar>(x: &Tensor<F>, kernel: &Tensor<F>) -> Result<Tensor<F>> {
    let (bs, l, e) = (x.dim(0), x.dim(1), x.dim(2));
    kernel.check_shape(&[l, e], "apply_causal_kernel")?;
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let kd = kernel.data();
    let yd = y.data_mut();
    for bi in 0..bs {
        for t in 0..l {
            for i in 0..=t {
                let tap = (t - i) * e;
                let src = (bi * l + i) * e;
                let dst = (bi * l + t) * e;
                for ei in 0..e {
                    yd[dst + ei] += kd[tap + ei] * xd[src + ei];
                }
            }
        }
    }
    Ok(y)
}

/// Uncoupled convolution engine end to end: refuses time-varying factors,
/// otherwise produces `y[b,t,e] = sum_n c[n] * h[b,t,e,n]` via the global
/// kernel applied to the input signal `x[B, L, E]`.
pub fn uncoupled_conv_output<F: Scalar>(
    a_bar: &Tensor<F>,
    b_bar: &Tensor<F>,
    c: &Tensor<F>,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    let a_const = require_time_invariant(a_bar, "uncoupled_conv_kernel")?;
    let b_const = require_time_invariant(b_bar, "uncoupled_conv_kernel")?;
    let l = x.dim(1);
    let kernel = uncoupled_conv_kernel(&a_const, &b_const, c, l)?;
    apply_causal_kernel(x, &kernel)
}

/// Coupled convolution engine: `y_t = C · sum_{i<=t} P^{t-i} U_i` with a
/// constant fused transition `P` (`[B,L,E,N]` input, refused when time-
/// varying) and time-varying fused input `U[B,L,E,N]`.
pub fn coupled_conv_output<F: Scalar>(
    p: &Tensor<F>,
    u: &Tensor<F>,
    c: &Tensor<F>,
) -> Result<Tensor<F>> {
    let p_const = require_time_invariant(p, "coupled_conv_output")?;
    let (bs, l, e, n) = (u.dim(0), u.dim(1), u.dim(2), u.dim(3));
    c.check_shape(&[n], "coupled_conv_output c")?;
    let mut y = Tensor::zeros(&[bs, l, e]);
    let pd = p_const.data();
    let ud = u.data();
    let cd = c.data();
    let yd = y.data_mut();
    // Direct evaluation with running powers of P per lag.
    for bi in 0..bs {
        for ei in 0..e {
            for ni in 0..n {
                let pv = pd[ei * n + ni];
                for i in 0..l {
                    let uv = ud[((bi * l + i) * e + ei) * n + ni];
                    let mut pow = F::one();
                    for t in i..l {
                        yd[(bi * l + t) * e + ei] += cd[ni] * pow * uv;
                        pow *= pv;
                    }
                }
            }
        }
    }
    Ok(y)
}
