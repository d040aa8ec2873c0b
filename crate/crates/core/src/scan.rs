//! Linear-recurrence engines: strict sequential evaluation and a
//! work-efficient associative scan.
//!
//! Both evaluate `h_t = a_t * h_{t-1} + b_t` per independent
//! (batch, channel, state) lane. The sequential engine is the oracle for
//! every equivalence test; the associative scan reproduces it up to
//! floating-point reassociation with `O(log L)` depth.

use crate::error::{CoreError, Result};
use crate::tensor::{Scalar, Tensor};

/// The affine map `h -> a * h + b` as a scan monoid element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanElement<F> {
    pub a: F,
    pub b: F,
}

impl<F: Scalar> ScanElement<F> {
    pub const fn new(a: F, b: F) -> Self {
        Self { a, b }
    }

    /// Identity of the composition monoid.
    pub fn identity() -> Self {
        Self {
            a: F::one(),
            b: F::zero(),
        }
    }

    /// Apply `self` first, then `next`:
    /// `(a2*a1, a2*b1 + b2)`. Associative.
    #[inline]
    pub fn then(self, next: Self) -> Self {
        Self {
            a: next.a * self.a,
            b: next.a * self.b + next.b,
        }
    }

    #[inline]
    pub fn apply(self, h: F) -> F {
        self.a * h + self.b
    }
}

fn check_factor_shapes<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    h0: &Tensor<F>,
) -> Result<(usize, usize, usize, usize)> {
    if a.rank() != 4 {
        return Err(CoreError::ShapeMismatch {
            op: "scan factors",
            expected: vec![0, 0, 0, 0],
            found: a.shape().to_vec(),
        });
    }
    a.same_shape(b, "scan factors")?;
    let (bs, l, e, n) = (a.dim(0), a.dim(1), a.dim(2), a.dim(3));
    h0.check_shape(&[bs, e, n], "scan initial state")?;
    Ok((bs, l, e, n))
}

/// One step of the discrete recurrence: `h_t = a ⊙ h_prev + b`, all
/// tensors `[B,E,N]` (diagonal transition, so elementwise).
pub fn recurrence_step<F: Scalar>(
    h_prev: &Tensor<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>> {
    h_prev.same_shape(a, "recurrence_step")?;
    h_prev.same_shape(b, "recurrence_step")?;
    let mut h = Tensor::zeros(h_prev.shape());
    for i in 0..h.numel() {
        h.data_mut()[i] = a.data()[i] * h_prev.data()[i] + b.data()[i];
    }
    Ok(h)
}

/// Left-to-right application of `recurrence_step` over the length axis.
/// Factors `[B,L,E,N]`, initial state `[B,E,N]`; returns all states
/// `h_{1..L}` as `[B,L,E,N]`.
pub fn sequential_scan<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    h0: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (bs, l, e, n) = check_factor_shapes(a, b, h0)?;
    let lane = e * n;
    let mut out = Tensor::zeros(a.shape());
    let ad = a.data();
    let bd = b.data();
    let h0d = h0.data();
    let od = out.data_mut();
    for bi in 0..bs {
        for j in 0..lane {
            let mut h = h0d[bi * lane + j];
            for t in 0..l {
                let idx = (bi * l + t) * lane + j;
                h = ad[idx] * h + bd[idx];
                od[idx] = h;
            }
        }
    }
    Ok(out)
}

/// Work-efficient inclusive scan over `ScanElement` composition
/// (up-sweep / down-sweep on a power-of-two padded block, identity
/// padding). Per-lane reduction order is fixed, so results are
/// deterministic. Equal to `sequential_scan` up to reassociation.
pub fn associative_scan<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    h0: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (bs, l, e, n) = check_factor_shapes(a, b, h0)?;
    if l == 0 {
        return Err(CoreError::EmptyInput("associative_scan"));
    }
    let lane = e * n;
    let padded = l.next_power_of_two();
    let mut out = Tensor::zeros(a.shape());
    let ad = a.data();
    let bd = b.data();
    let h0d = h0.data();
    let od = out.data_mut();
    let mut buf: Vec<ScanElement<F>> = vec![ScanElement::identity(); padded];
    for bi in 0..bs {
        for j in 0..lane {
            for t in 0..l {
                let idx = (bi * l + t) * lane + j;
                buf[t] = ScanElement::new(ad[idx], bd[idx]);
            }
            for slot in buf.iter_mut().take(padded).skip(l) {
                *slot = ScanElement::identity();
            }
            blelloch_inclusive(&mut buf);
            let h0v = h0d[bi * lane + j];
            for t in 0..l {
                let idx = (bi * l + t) * lane + j;
                od[idx] = buf[t].apply(h0v);
            }
        }
    }
    Ok(out)
}

/// In-place inclusive scan on a power-of-two slice: up-sweep (reduce),
/// down-sweep producing the exclusive scan, then one composition with the
/// saved leaf to make it inclusive.
fn blelloch_inclusive<F: Scalar>(buf: &mut [ScanElement<F>]) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    if n == 1 {
        return;
    }
    let leaves: Vec<ScanElement<F>> = buf.to_vec();
    // Up-sweep.
    let mut stride = 1;
    while stride < n {
        let mut i = 2 * stride - 1;
        while i < n {
            buf[i] = buf[i - stride].then(buf[i]);
            i += 2 * stride;
        }
        stride *= 2;
    }
    // Down-sweep: root becomes the identity, producing the exclusive scan.
    buf[n - 1] = ScanElement::identity();
    stride = n / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < n {
            let left = buf[i - stride];
            buf[i - stride] = buf[i];
            buf[i] = buf[i].then(left);
            i += 2 * stride;
        }
        stride /= 2;
    }
    // Exclusive -> inclusive.
    for (slot, leaf) in buf.iter_mut().zip(leaves) {
        *slot = slot.then(leaf);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_instance(
        seed: u64,
        bs: usize,
        l: usize,
        e: usize,
        n: usize,
    ) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn(&[bs, l, e, n], |_| rng.gen_range(0.01..0.99));
        let b = Tensor::from_fn(&[bs, l, e, n], |_| rng.gen_range(-1.0..1.0));
        let h0 = Tensor::from_fn(&[bs, e, n], |_| rng.gen_range(-1.0..1.0));
        (a, b, h0)
    }

    #[test]
    fn zero_initial_state_single_step() {
        let (a, b, _) = rand_instance(1, 1, 1, 2, 2);
        let h0 = Tensor::zeros(&[1, 2, 2]);
        let h = sequential_scan(&a, &b, &h0).unwrap();
        assert_eq!(h.data(), b.data());
    }

    #[test]
    fn identity_transition_keeps_state() {
        let h0 = Tensor::new(&[1, 1, 2], vec![3.0, -4.0]).unwrap();
        let a = Tensor::filled(&[1, 5, 1, 2], 1.0);
        let b = Tensor::zeros(&[1, 5, 1, 2]);
        let h = sequential_scan(&a, &b, &h0).unwrap();
        for t in 0..5 {
            assert_eq!(h.at4(0, t, 0, 0), 3.0);
            assert_eq!(h.at4(0, t, 0, 1), -4.0);
        }
    }

    #[test]
    fn memoryless_when_a_is_zero() {
        let (_, b, h0) = rand_instance(2, 1, 4, 2, 2);
        let a = Tensor::zeros(&[1, 4, 2, 2]);
        let h = sequential_scan(&a, &b, &h0).unwrap();
        assert_eq!(h.data(), b.data());
    }

    #[test]
    fn three_step_chain_matches_closed_form() {
        // Constant factors: h_3 = a^3 h0 + a^2 b + a b + b.
        let (a, b, h0) = (0.7f64, 0.3f64, 2.0f64);
        let at = Tensor::filled(&[1, 3, 1, 1], a);
        let bt = Tensor::filled(&[1, 3, 1, 1], b);
        let h0t = Tensor::filled(&[1, 1, 1], h0);
        let h = sequential_scan(&at, &bt, &h0t).unwrap();
        let expect = a * a * a * h0 + a * a * b + a * b + b;
        assert!((h.at4(0, 2, 0, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn l1_reduces_to_recurrence_step() {
        let (a, b, h0) = rand_instance(3, 2, 1, 3, 2);
        let seq = sequential_scan(&a, &b, &h0).unwrap();
        let step = recurrence_step(
            &h0,
            &a.reshape(&[2, 3, 2]).unwrap(),
            &b.reshape(&[2, 3, 2]).unwrap(),
        )
        .unwrap();
        assert_eq!(seq.data(), step.data());
    }

    #[test]
    fn composition_law_two_steps() {
        let e1 = ScanElement::new(0.5f64, 1.0);
        let e2 = ScanElement::new(-0.25, 2.0);
        let h0 = 3.0;
        let two_steps = e2.apply(e1.apply(h0));
        assert!((e1.then(e2).apply(h0) - two_steps).abs() < 1e-15);
    }

    #[test]
    fn constant_factors_match_geometric_series() {
        let (a, h0) = (0.6f64, 0.9f64);
        let l = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bs: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let at = Tensor::filled(&[1, l, 1, 1], a);
        let bt = Tensor::new(&[1, l, 1, 1], bs.clone()).unwrap();
        let h0t = Tensor::filled(&[1, 1, 1], h0);
        let h = associative_scan(&at, &bt, &h0t).unwrap();
        let mut expect = a.powi(l as i32) * h0;
        for (i, &bi) in bs.iter().enumerate() {
            expect += a.powi((l - 1 - i) as i32) * bi;
        }
        assert!((h.at4(0, l - 1, 0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn associative_matches_sequential_time_varying() {
        for seed in 0..5u64 {
            let (a, b, h0) = rand_instance(100 + seed, 2, 64, 3, 4);
            let hs = sequential_scan(&a, &b, &h0).unwrap();
            let ha = associative_scan(&a, &b, &h0).unwrap();
            assert!(max_abs_diff(&hs, &ha).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn non_power_of_two_lengths() {
        for l in [1usize, 3, 5, 17, 63] {
            let (a, b, h0) = rand_instance(l as u64, 1, l, 2, 2);
            let hs = sequential_scan(&a, &b, &h0).unwrap();
            let ha = associative_scan(&a, &b, &h0).unwrap();
            assert!(max_abs_diff(&hs, &ha).unwrap() <= 1e-12, "L={l}");
        }
    }

    proptest! {
        #[test]
        fn composition_is_associative(
            vals in proptest::collection::vec(-1.0f64..1.0, 6)
        ) {
            let e1 = ScanElement::new(vals[0], vals[1]);
            let e2 = ScanElement::new(vals[2], vals[3]);
            let e3 = ScanElement::new(vals[4], vals[5]);
            let left = e1.then(e2).then(e3);
            let right = e1.then(e2.then(e3));
            prop_assert!((left.a - right.a).abs() <= 1e-12);
            prop_assert!((left.b - right.b).abs() <= 1e-12);
        }

        #[test]
        fn engines_agree_on_random_instances(
            seed in 0u64..1000,
            l in 1usize..40,
        ) {
            let (a, b, h0) = rand_instance(seed, 1, l, 2, 3);
            let hs = sequential_scan(&a, &b, &h0).unwrap();
            let ha = associative_scan(&a, &b, &h0).unwrap();
            prop_assert!(max_abs_diff(&hs, &ha).unwrap() <= 1e-11);
        }
    }
}
