//! Single-head scaled dot-product attention, the quadratic-in-length
//! fusion baseline.

use crate::error::Result;
use crate::tensor::{fl, Scalar, Tensor};

/// `out = softmax(Q Kᵀ / sqrt(D)) V` with `Q, K, V: [B, L, D]`.
///
/// Returns the output and the attention weights `[B, L, L]` (cached for
/// the backward pass). Deliberately materializes the full `L × L` score
/// matrix: this baseline exists to exhibit quadratic time and memory.
pub fn single_head_attention<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (b, l, d) = (q.dim(0), q.dim(1), q.dim(2));
    k.check_shape(&[b, l, d], "attention keys")?;
    v.check_shape(&[b, l, d], "attention values")?;
    let scale = fl::<F>(1.0 / (d as f64).sqrt());
    let mut attn = Tensor::zeros(&[b, l, l]);
    let qd = q.data();
    let kd = k.data();
    {
        let ad = attn.data_mut();
        for bi in 0..b {
            for i in 0..l {
                let row = &mut ad[(bi * l + i) * l..(bi * l + i + 1) * l];
                let qi = &qd[(bi * l + i) * d..(bi * l + i + 1) * d];
                let mut m = F::neg_infinity();
                for (j, rv) in row.iter_mut().enumerate() {
                    let kj = &kd[(bi * l + j) * d..(bi * l + j + 1) * d];
                    let mut s = F::zero();
                    for (x, y) in qi.iter().zip(kj) {
                        s += *x * *y;
                    }
                    *rv = s * scale;
                    m = m.max(*rv);
                }
                let mut z = F::zero();
                for rv in row.iter_mut() {
                    *rv = (*rv - m).exp();
                    z += *rv;
                }
                for rv in row.iter_mut() {
                    *rv = *rv / z;
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[b, l, d]);
    {
        let ad = attn.data();
        let vd = v.data();
        let od = out.data_mut();
        for bi in 0..b {
            for i in 0..l {
                for j in 0..l {
                    let w = ad[(bi * l + i) * l + j];
                    let vj = &vd[(bi * l + j) * d..(bi * l + j + 1) * d];
                    let oi = &mut od[(bi * l + i) * d..(bi * l + i + 1) * d];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
    }
    Ok((out, attn))
}

/// Gradients of `single_head_attention`: returns `(dq, dk, dv)`.
pub fn single_head_attention_backward<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    attn: &Tensor<F>,
    d_out: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (b, l, d) = (q.dim(0), q.dim(1), q.dim(2));
    let scale = fl::<F>(1.0 / (d as f64).sqrt());
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let ad = attn.data();
    let vd = v.data();
    let god = d_out.data();
    let qd = q.data();
    let kd = k.data();
    let dqd = dq.data_mut();
    let dkd = dk.data_mut();
    let dvd = dv.data_mut();
    // Per (batch, query row): dV += Aᵀ dOut; dS = A ⊙ (dA − rowsum(A ⊙ dA))
    // with dA = dOut Vᵀ; then dQ = dS K·scale, dK += dSᵀ Q·scale.
    let mut da_row = vec![F::zero(); l];
    for bi in 0..b {
        for i in 0..l {
            let goi = &god[(bi * l + i) * d..(bi * l + i + 1) * d];
            let arow = &ad[(bi * l + i) * l..(bi * l + i + 1) * l];
            let mut dot = F::zero();
            for j in 0..l {
                let vj = &vd[(bi * l + j) * d..(bi * l + j + 1) * d];
                let mut s = F::zero();
                for (x, y) in goi.iter().zip(vj) {
                    s += *x * *y;
                }
                da_row[j] = s;
                dot += arow[j] * s;
                let dvj = &mut dvd[(bi * l + j) * d..(bi * l + j + 1) * d];
                for (o, &g) in dvj.iter_mut().zip(goi) {
                    *o += arow[j] * g;
                }
            }
            let qi = &qd[(bi * l + i) * d..(bi * l + i + 1) * d];
            let dqi_base = (bi * l + i) * d;
            for j in 0..l {
                let ds = arow[j] * (da_row[j] - dot) * scale;
                let kj = &kd[(bi * l + j) * d..(bi * l + j + 1) * d];
                for c in 0..d {
                    dqd[dqi_base + c] += ds * kj[c];
                    dkd[(bi * l + j) * d + c] += ds * qi[c];
                }
            }
        }
    }
    Ok((dq, dk, dv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{numeric_grad_scalar, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn rows_of_attention_matrix_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_t(&mut rng, &[2, 5, 3]);
        let k = rand_t(&mut rng, &[2, 5, 3]);
        let v = rand_t(&mut rng, &[2, 5, 3]);
        let (_, attn) = single_head_attention(&q, &k, &v).unwrap();
        for bi in 0..2 {
            for i in 0..5 {
                let s: f64 = (0..5).map(|j| attn.at3(bi, i, j)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_queries_average_over_time() {
        // With Q = 0 every score ties, so softmax is uniform and each
        // output position is the time average of V.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = 6;
        let q = Tensor::zeros(&[1, l, 4]);
        let k = rand_t(&mut rng, &[1, l, 4]);
        let v = rand_t(&mut rng, &[1, l, 4]);
        let (out, _) = single_head_attention(&q, &k, &v).unwrap();
        for c in 0..4 {
            let mean: f64 = (0..l).map(|t| v.at3(0, t, c)).sum::<f64>() / l as f64;
            for i in 0..l {
                assert!((out.at3(0, i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_attention_selects_a_value() {
        // A huge dot product with exactly one key makes attention a lookup.
        let l = 4;
        let d = 2;
        let mut q = Tensor::zeros(&[1, l, d]);
        let mut k = Tensor::zeros(&[1, l, d]);
        for t in 0..l {
            q.set3(0, t, 0, 100.0);
        }
        k.set3(0, 2, 0, 100.0); // only key 2 matches
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = rand_t(&mut rng, &[1, l, d]);
        let (out, _) = single_head_attention(&q, &k, &v).unwrap();
        for i in 0..l {
            for c in 0..d {
                assert!((out.at3(0, i, c) - v.at3(0, 2, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = [2, 4, 3];
        let q = rand_t(&mut rng, &shape);
        let k = rand_t(&mut rng, &shape);
        let v = rand_t(&mut rng, &shape);
        let coeff = rand_t(&mut rng, &shape);
        let loss = |q: &Tensor, k: &Tensor, v: &Tensor| {
            single_head_attention(q, k, v)
                .unwrap()
                .0
                .mul(&coeff)
                .unwrap()
                .sum()
        };
        let (_, attn) = single_head_attention(&q, &k, &v).unwrap();
        let (dq, dk, dv) = single_head_attention_backward(&q, &k, &v, &attn, &coeff).unwrap();
        assert!(rel_err(&dq, &numeric_grad_scalar(&q, 1e-6, |t| loss(t, &k, &v))) < 1e-6);
        assert!(rel_err(&dk, &numeric_grad_scalar(&k, 1e-6, |t| loss(&q, t, &v))) < 1e-6);
        assert!(rel_err(&dv, &numeric_grad_scalar(&v, 1e-6, |t| loss(&q, &k, t))) < 1e-6);
    }
}
