//! Randomized property-verification suite behind the `verify` command:
//! engine equivalences, coupling identities, and gradient checks, each
//! reporting its maximum observed deviation and the seed of the worst
//! instance for replay.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{block_backward_uncoupled, block_forward, BlockDims};
use crate::check::{numeric_grad_scalar, rel_err};
use crate::coupled::{
    coupled_parallel_scan, coupled_step_full, coupled_step_summed, CoupledStateSet,
};
use crate::error::Result;
use crate::kernel::coupled_conv_output;
use crate::model::{
    init_model_params, model_backward, model_forward, CoupledModelConfig, FusionMode, HeadKind,
    ModalityBatch,
};
use crate::scan::{associative_scan, sequential_scan};
use crate::store::ParameterStore;
use crate::tensor::{max_abs_diff, Tensor};

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Overrides every property's pinned tolerance when set.
    pub tolerance: Option<f64>,
    pub instances: usize,
    pub max_l: usize,
    pub max_n: usize,
    pub max_e: usize,
    pub max_m: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            tolerance: None,
            instances: 100,
            max_l: 64,
            max_n: 8,
            max_e: 8,
            max_m: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: &'static str,
    pub max_deviation: f64,
    pub tolerance: f64,
    /// Seed of the worst instance, for replay.
    pub worst_seed: u64,
    pub pass: bool,
}

struct Recorder {
    name: &'static str,
    max_deviation: f64,
    worst_seed: u64,
}

impl Recorder {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            max_deviation: 0.0,
            worst_seed: 0,
        }
    }

    fn observe(&mut self, deviation: f64, seed: u64) {
        if deviation > self.max_deviation || deviation.is_nan() {
            self.max_deviation = deviation;
            self.worst_seed = seed;
        }
    }

    fn finish(self, pinned_tol: f64, opts: &VerifyOptions) -> PropertyResult {
        let tolerance = opts.tolerance.unwrap_or(pinned_tol);
        PropertyResult {
            name: self.name,
            max_deviation: self.max_deviation,
            tolerance,
            worst_seed: self.worst_seed,
            pass: self.max_deviation <= tolerance,
        }
    }
}

fn rand_dims(rng: &mut ChaCha8Rng, opts: &VerifyOptions) -> (usize, usize, usize, usize) {
    (
        rng.gen_range(1..=opts.max_l),
        rng.gen_range(1..=opts.max_n),
        rng.gen_range(1..=opts.max_e),
        rng.gen_range(1..=opts.max_m),
    )
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Sequential vs associative scan (time-varying) and both vs the global
/// convolution kernel engine (time-invariant instances).
fn engine_equivalence(opts: &VerifyOptions) -> Result<PropertyResult> {
    let mut rec = Recorder::new("engine_equivalence");
    for i in 0..opts.instances {
        let seed = opts.seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, n, e, m) = rand_dims(&mut rng, opts);
        let b = rng.gen_range(1..=2);
        // Time-varying: sequential vs associative on the fused recurrence.
        let s: Vec<Tensor> = (0..m)
            .map(|_| rand_t(&mut rng, &[b, l, e, n], 0.0, 0.9 / m as f64))
            .collect();
        let bx: Vec<Tensor> = (0..m)
            .map(|_| rand_t(&mut rng, &[b, l, e, n], -1.0, 1.0))
            .collect();
        let h0 = CoupledStateSet {
            states: (0..m).map(|_| rand_t(&mut rng, &[b, e, n], -1.0, 1.0)).collect(),
        };
        let res = coupled_parallel_scan(&s, &bx, &h0)?;
        let mut p = s[0].clone();
        for si in &s[1..] {
            p.add_inplace(si)?;
        }
        let mut u = bx[0].clone();
        for bi in &bx[1..] {
            u.add_inplace(bi)?;
        }
        let f0 = h0.fused_sum()?;
        let seq = sequential_scan(&p, &u, &f0)?;
        let assoc = associative_scan(&p, &u, &f0)?;
        rec.observe(max_abs_diff(&seq, &assoc)?, seed);
        rec.observe(max_abs_diff(&res.fused, &seq)?, seed);
        // Time-invariant: both engines vs the convolution kernel.
        let p_row = rand_t(&mut rng, &[1, 1, e, n], 0.0, 0.9);
        let p_const = Tensor::from_fn(&[b, l, e, n], |idx| p_row.data()[idx % (e * n)]);
        let u_var = rand_t(&mut rng, &[b, l, e, n], -1.0, 1.0);
        let c = rand_t(&mut rng, &[n], -1.0, 1.0);
        let y_conv = coupled_conv_output(&p_const, &u_var, &c)?;
        let h_seq = sequential_scan(&p_const, &u_var, &Tensor::zeros(&[b, e, n]))?;
        let mut y_seq = Tensor::zeros(&[b, l, e]);
        for bi in 0..b {
            for t in 0..l {
                for ei in 0..e {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        acc += c.data()[ni] * h_seq.at4(bi, t, ei, ni);
                    }
                    y_seq.set3(bi, t, ei, acc);
                }
            }
        }
        rec.observe(max_abs_diff(&y_conv, &y_seq)?, seed);
    }
    Ok(rec.finish(1e-10, opts))
}

/// Full pairwise coupling with uniform rows equals the summed form.
fn pairwise_identity(opts: &VerifyOptions) -> Result<PropertyResult> {
    let mut rec = Recorder::new("pairwise_vs_summed");
    for i in 0..opts.instances {
        let seed = opts.seed.wrapping_add(1000 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, n, e, m) = rand_dims(&mut rng, opts);
        let b = rng.gen_range(1..=2);
        let shape = [b, e, n];
        let set = CoupledStateSet {
            states: (0..m).map(|_| rand_t(&mut rng, &shape, -1.0, 1.0)).collect(),
        };
        let s: Vec<Tensor> = (0..m).map(|_| rand_t(&mut rng, &shape, 0.0, 1.0)).collect();
        let bx: Vec<Tensor> = (0..m).map(|_| rand_t(&mut rng, &shape, -1.0, 1.0)).collect();
        let pairs: Vec<Vec<Tensor>> = (0..m).map(|_| s.clone()).collect();
        let a = coupled_step_summed(&set, &s, &bx)?;
        let c = coupled_step_full(&set, &pairs, &bx)?;
        for mi in 0..m {
            rec.observe(max_abs_diff(&a.states[mi], &c.states[mi])?, seed);
        }
    }
    Ok(rec.finish(1e-12, opts))
}

/// Single-modality coupled model vs the uncoupled block built from the
/// same sub-operations.
fn single_modality_reduction(opts: &VerifyOptions) -> Result<PropertyResult> {
    let mut rec = Recorder::new("single_modality_reduction");
    for i in 0..opts.instances.min(20) {
        let seed = opts.seed.wrapping_add(2000 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CoupledModelConfig {
            modalities: 1,
            d_raw: vec![3],
            n_layers: 2,
            d_model: 4,
            expansion: 2,
            conv_kernel: 2,
            n_state: 2,
            dt_rank: 2,
            head: HeadKind::Regression,
            fusion: FusionMode::Coupled,
        };
        let mut cfg_un = cfg.clone();
        cfg_un.fusion = FusionMode::Mamba;
        let mut store = ParameterStore::new();
        init_model_params(&mut store, &cfg, seed)?;
        let l = rng.gen_range(1..=opts.max_l.min(16));
        let batch =
            ModalityBatch::aligned(vec![rand_t(&mut rng, &[1, l, 3], -1.0, 1.0)]);
        let (pc, _) = model_forward(&store, &cfg, &batch)?;
        let (pu, _) = model_forward(&store, &cfg_un, &batch)?;
        rec.observe(max_abs_diff(&pc, &pu)?.abs(), seed);
    }
    Ok(rec.finish(1e-12, opts))
}

/// Analytic gradients of the full block and the tiny end-to-end model vs
/// central finite differences (max relative error).
fn gradient_checks(opts: &VerifyOptions) -> Result<PropertyResult> {
    let mut rec = Recorder::new("gradient_checks");
    for i in 0..opts.instances.min(5) {
        let seed = opts.seed.wrapping_add(3000 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Block-level.
        let dims = BlockDims {
            d: 4,
            e: 8,
            n: 2,
            k: 2,
            r: 2,
        };
        let mut store = ParameterStore::new();
        crate::block::init_block_params(&mut store, "blk", &dims, &mut rng);
        let x = rand_t(&mut rng, &[1, 3, dims.d], -1.0, 1.0);
        let coeff = rand_t(&mut rng, &[1, 3, dims.d], -1.0, 1.0);
        let (_, mut cache, _) = block_forward(&store, "blk", &x, None, &dims, None)?;
        let d_x = block_backward_uncoupled(&mut store, "blk", &mut cache, &coeff)?;
        let num = numeric_grad_scalar(&x, 1e-5, |t| {
            let (y, _, _) = block_forward(&store, "blk", t, None, &dims, None).unwrap();
            y.mul(&coeff).unwrap().sum()
        });
        rec.observe(rel_err(&d_x, &num), seed);
        // Model-level (input gradients of every modality).
        let cfg = CoupledModelConfig {
            modalities: 2,
            d_raw: vec![3, 2],
            n_layers: 1,
            d_model: 4,
            expansion: 2,
            conv_kernel: 2,
            n_state: 2,
            dt_rank: 2,
            head: HeadKind::Regression,
            fusion: FusionMode::Coupled,
        };
        let mut store = ParameterStore::new();
        init_model_params(&mut store, &cfg, seed)?;
        let batch = ModalityBatch::aligned(vec![
            rand_t(&mut rng, &[1, 3, 3], -1.0, 1.0),
            rand_t(&mut rng, &[1, 3, 2], -1.0, 1.0),
        ]);
        let co = rand_t(&mut rng, &[1, 1], -1.0, 1.0);
        let (_, mut cache) = model_forward(&store, &cfg, &batch)?;
        let d_in = model_backward(&mut store, &cfg, &batch, &mut cache, &co)?;
        for mi in 0..2 {
            let num = numeric_grad_scalar(&batch.inputs[mi], 1e-5, |t| {
                let mut b2 = batch.clone();
                b2.inputs[mi] = t.clone();
                let (p, _) = model_forward(&store, &cfg, &b2).unwrap();
                p.mul(&co).unwrap().sum()
            });
            rec.observe(rel_err(&d_in[mi], &num), seed);
        }
    }
    Ok(rec.finish(1e-4, opts))
}

/// Sum of per-modality states equals the fused trace at every step.
fn fused_sum_identity(opts: &VerifyOptions) -> Result<PropertyResult> {
    let mut rec = Recorder::new("fused_sum_identity");
    for i in 0..opts.instances {
        let seed = opts.seed.wrapping_add(4000 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, n, e, m) = rand_dims(&mut rng, opts);
        let s: Vec<Tensor> = (0..m)
            .map(|_| rand_t(&mut rng, &[1, l, e, n], 0.0, 0.9 / m as f64))
            .collect();
        let bx: Vec<Tensor> = (0..m)
            .map(|_| rand_t(&mut rng, &[1, l, e, n], -1.0, 1.0))
            .collect();
        let h0 = CoupledStateSet::zeros(m, &[1, e, n]);
        let res = coupled_parallel_scan(&s, &bx, &h0)?;
        let mut sum = res.states[0].clone();
        for h in &res.states[1..] {
            sum.add_inplace(h)?;
        }
        rec.observe(max_abs_diff(&sum, &res.fused)?, seed);
    }
    Ok(rec.finish(1e-12, opts))
}

/// Run every property; results in fixed order.
pub fn run_verification(opts: &VerifyOptions) -> Result<Vec<PropertyResult>> {
    Ok(vec![
        engine_equivalence(opts)?,
        pairwise_identity(opts)?,
        single_modality_reduction(opts)?,
        gradient_checks(opts)?,
        fused_sum_identity(opts)?,
    ])
}
