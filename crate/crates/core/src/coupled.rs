//! Coupled state transitions across modality chains.
//!
//! The summed form computes one fused sum of the previous states and feeds
//! it through a per-modality transition; the full form keeps a transition
//! factor per ordered modality pair and is the reference for the
//! memory/accuracy comparison. The parallel form evaluates the fused-sum
//! recurrence with the associative scan and recovers every per-modality
//! state from it.

use crate::error::{CoreError, Result};
use crate::scan::associative_scan;
use crate::tensor::{Scalar, Tensor};

/// Hidden state per modality at one timestep: `M` tensors `[B, E, N]`,
/// all of identical shape.
#[derive(Debug, Clone)]
pub struct CoupledStateSet<F: Scalar = f64> {
    pub states: Vec<Tensor<F>>,
}

impl<F: Scalar> CoupledStateSet<F> {
    pub fn zeros(m: usize, shape: &[usize]) -> Self {
        Self {
            states: (0..m).map(|_| Tensor::zeros(shape)).collect(),
        }
    }

    pub fn modalities(&self) -> usize {
        self.states.len()
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.states.is_empty() {
            return Err(CoreError::EmptyInput(op));
        }
        for s in &self.states[1..] {
            self.states[0].same_shape(s, op)?;
        }
        Ok(())
    }

    /// Elementwise sum over modalities.
    pub fn fused_sum(&self) -> Result<Tensor<F>> {
        self.validate("fused_sum")?;
        let mut out = self.states[0].clone();
        for s in &self.states[1..] {
            out.add_inplace(s)?;
        }
        Ok(out)
    }
}

fn check_modal_count<T>(items: &[T], m: usize, what: &'static str) -> Result<()> {
    if items.len() != m {
        return Err(CoreError::Config(format!(
            "{what}: expected {m} modalities, found {}",
            items.len()
        )));
    }
    Ok(())
}

/// Summation-before-transition step: `fused = sum_m h_prev^m` computed
/// once, then `h^m = s_m ⊙ fused + bx_m`. All tensors `[B, E, N]`.
pub fn coupled_step_summed<F: Scalar>(
    states: &CoupledStateSet<F>,
    s: &[Tensor<F>],
    bx: &[Tensor<F>],
) -> Result<CoupledStateSet<F>> {
    states.validate("coupled_step_summed")?;
    let m = states.modalities();
    check_modal_count(s, m, "coupled_step_summed transitions")?;
    check_modal_count(bx, m, "coupled_step_summed inputs")?;
    let fused = states.fused_sum()?;
    let mut next = Vec::with_capacity(m);
    for mi in 0..m {
        s[mi].same_shape(&fused, "coupled_step_summed")?;
        let mut h = Tensor::zeros(fused.shape());
        for i in 0..h.numel() {
            h.data_mut()[i] = s[mi].data()[i] * fused.data()[i] + bx[mi].data()[i];
        }
        next.push(h);
    }
    Ok(CoupledStateSet { states: next })
}

/// Full pairwise coupling: `h^m = sum_i a_pairs[i][m] ⊙ h_prev^i + bx_m`.
/// `a_pairs` is indexed `[source i][target m]`.
pub fn coupled_step_full<F: Scalar>(
    states: &CoupledStateSet<F>,
    a_pairs: &[Vec<Tensor<F>>],
    bx: &[Tensor<F>],
) -> Result<CoupledStateSet<F>> {
    states.validate("coupled_step_full")?;
    let m = states.modalities();
    check_modal_count(a_pairs, m, "coupled_step_full pair rows")?;
    for row in a_pairs {
        check_modal_count(row, m, "coupled_step_full pair columns")?;
    }
    check_modal_count(bx, m, "coupled_step_full inputs")?;
    let shape = states.states[0].shape().to_vec();
    let mut next = Vec::with_capacity(m);
    for mi in 0..m {
        let mut h = bx[mi].clone();
        h.check_shape(&shape, "coupled_step_full")?;
        for (i, hi) in states.states.iter().enumerate() {
            let a = &a_pairs[i][mi];
            a.check_shape(&shape, "coupled_step_full")?;
            for k in 0..h.numel() {
                h.data_mut()[k] += a.data()[k] * hi.data()[k];
            }
        }
        next.push(h);
    }
    Ok(CoupledStateSet { states: next })
}

/// Output of the parallel coupled engine over a whole sequence.
#[derive(Debug, Clone)]
pub struct CoupledScanResult<F: Scalar = f64> {
    /// Fused sums `f_t = sum_m h_t^m`, `[B, L, E, N]`.
    pub fused: Tensor<F>,
    /// Per-modality state trajectories, each `[B, L, E, N]`.
    pub states: Vec<Tensor<F>>,
}

/// Evaluate the coupled recurrence for all timesteps at once.
///
/// The fused sum obeys the scalar recurrence `f_t = P_t ⊙ f_{t-1} + U_t`
/// with `P_t = sum_m s_m,t` and `U_t = sum_m bx_m,t`, evaluated by the
/// associative scan (time-varying `P_t` handled as prefix products). The
/// per-modality states are then recovered as
/// `h_t^m = s_m,t ⊙ f_{t-1} + bx_m,t`.
pub fn coupled_parallel_scan<F: Scalar>(
    s: &[Tensor<F>],
    bx: &[Tensor<F>],
    h0: &CoupledStateSet<F>,
) -> Result<CoupledScanResult<F>> {
    h0.validate("coupled_parallel_scan")?;
    let m = h0.modalities();
    check_modal_count(s, m, "coupled_parallel_scan transitions")?;
    check_modal_count(bx, m, "coupled_parallel_scan inputs")?;
    let mut p = s[0].clone();
    for si in &s[1..] {
        p.add_inplace(si)?;
    }
    let mut u = bx[0].clone();
    for bi in &bx[1..] {
        u.add_inplace(bi)?;
    }
    let f0 = h0.fused_sum()?;
    let fused = associative_scan(&p, &u, &f0)?;
    let (bs, l, e, n) = (p.dim(0), p.dim(1), p.dim(2), p.dim(3));
    let lane = e * n;
    let mut states = Vec::with_capacity(m);
    for mi in 0..m {
        let mut h = Tensor::zeros(&[bs, l, e, n]);
        let sd = s[mi].data();
        let bd = bx[mi].data();
        let fd = fused.data();
        let f0d = f0.data();
        let hd = h.data_mut();
        for bi in 0..bs {
            for t in 0..l {
                for j in 0..lane {
                    let idx = (bi * l + t) * lane + j;
                    let f_prev = if t == 0 {
                        f0d[bi * lane + j]
                    } else {
                        fd[(bi * l + t - 1) * lane + j]
                    };
                    hd[idx] = sd[idx] * f_prev + bd[idx];
                }
            }
        }
        states.push(h);
    }
    Ok(CoupledScanResult { fused, states })
}

/// Gradients of the coupled recurrence.
#[derive(Debug, Clone)]
pub struct CoupledScanGrads<F: Scalar = f64> {
    pub d_s: Vec<Tensor<F>>,
    pub d_bx: Vec<Tensor<F>>,
    /// Gradient w.r.t. the fused initial state `f_0`; every per-modality
    /// initial state receives this same value.
    pub d_f0: Tensor<F>,
}

/// Reverse pass of `coupled_parallel_scan`: itself a right-to-left scan
/// with transition `P_t`. Exact adjoints, validated against finite
/// differences.
///
/// `d_states` holds the upstream gradient for every `h_t^m`.
pub fn coupled_scan_backward<F: Scalar>(
    s: &[Tensor<F>],
    forward: &CoupledScanResult<F>,
    h0: &CoupledStateSet<F>,
    d_states: &[Tensor<F>],
) -> Result<CoupledScanGrads<F>> {
    let m = s.len();
    check_modal_count(d_states, m, "coupled_scan_backward upstream")?;
    let (bs, l, e, n) = {
        let sh = s[0].shape();
        (sh[0], sh[1], sh[2], sh[3])
    };
    let lane = e * n;
    let f0 = h0.fused_sum()?;
    let mut d_s: Vec<Tensor<F>> = (0..m).map(|_| Tensor::zeros(s[0].shape())).collect();
    let mut d_bx: Vec<Tensor<F>> = (0..m).map(|_| Tensor::zeros(s[0].shape())).collect();
    let mut d_f0 = Tensor::zeros(&[bs, e, n]);
    let fd = forward.fused.data();
    let f0d = f0.data();
    // g holds dL/df_t for the timestep currently being processed.
    let mut g = vec![F::zero(); bs * lane];
    for bi in 0..bs {
        for j in 0..lane {
            g[bi * lane + j] = F::zero();
        }
    }
    for t in (0..l).rev() {
        // dL/df_t accumulates the direct use by h_{t+1} (already folded
        // into g when we processed t+1) plus nothing else at t = L-1.
        for bi in 0..bs {
            for j in 0..lane {
                let idx = (bi * l + t) * lane + j;
                let f_prev = if t == 0 {
                    f0d[bi * lane + j]
                } else {
                    fd[(bi * l + t - 1) * lane + j]
                };
                let gv = g[bi * lane + j];
                let mut p_t = F::zero();
                let mut next_g = F::zero();
                for mi in 0..m {
                    let sv = s[mi].data()[idx];
                    let dh = d_states[mi].data()[idx];
                    // h_t^m uses s directly and via P_t; bx via U_t.
                    d_s[mi].data_mut()[idx] = dh * f_prev + gv * f_prev;
                    d_bx[mi].data_mut()[idx] = dh + gv;
                    p_t += sv;
                    next_g += sv * dh;
                }
                // dL/df_{t-1} = sum_m s_m,t dh_m,t + P_t * dL/df_t.
                next_g += p_t * gv;
                if t == 0 {
                    d_f0.data_mut()[bi * lane + j] = next_g;
                } else {
                    g[bi * lane + j] = next_g;
                }
            }
        }
    }
    Ok(CoupledScanGrads { d_s, d_bx, d_f0 })
}
