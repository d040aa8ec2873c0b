//! Sequence-length scaling harness: wall-clock time and peak transient
//! allocation of the model forward pass as a function of L, for the
//! linear-scaling coupled fusion versus the quadratic cross-attention
//! baseline.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::model::{
    init_model_params, model_forward, CoupledModelConfig, FusionMode, HeadKind, ModalityBatch,
};
use crate::store::ParameterStore;
use crate::tensor::Tensor;

/// One measured point of the sweep.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub engine: String,
    pub fusion: String,
    pub l: usize,
    pub b: usize,
    pub d: usize,
    pub m: usize,
    pub threads: usize,
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub peak_bytes: usize,
    pub repeats: usize,
    /// Set when the run panicked (e.g. capacity overflow at large L);
    /// timing fields are zero in that case.
    pub failed: bool,
}

pub const BENCH_CSV_HEADER: &str =
    "engine,fusion,L,B,D,M,threads,median_s,min_s,max_s,peak_bytes,repeats";

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.engine,
            self.fusion,
            self.l,
            self.b,
            self.d,
            self.m,
            self.threads,
            self.median_s,
            self.min_s,
            self.max_s,
            self.peak_bytes,
            self.repeats
        )
    }
}

/// Sweep parameters. Single-threaded; the thread count is recorded in the
/// CSV for provenance.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub lengths: Vec<usize>,
    pub fusions: Vec<FusionMode>,
    pub batch: usize,
    pub d_model: usize,
    pub modalities: usize,
    pub n_layers: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lengths: vec![256, 512, 1024, 2048, 4096, 8192],
            fusions: vec![FusionMode::Coupled, FusionMode::CrossAttention],
            batch: 1,
            d_model: 16,
            modalities: 2,
            n_layers: 1,
            repeats: 5,
            seed: 0,
        }
    }
}

impl SweepConfig {
    fn model_config(&self, fusion: FusionMode) -> CoupledModelConfig {
        CoupledModelConfig {
            modalities: self.modalities,
            d_raw: vec![self.d_model; self.modalities],
            n_layers: self.n_layers,
            d_model: self.d_model,
            expansion: 2,
            conv_kernel: 4,
            n_state: 8,
            dt_rank: 2,
            head: HeadKind::Regression,
            fusion,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::Config(
                "sweep lengths must be strictly ascending".into(),
            ));
        }
        if self.lengths.is_empty() || self.fusions.is_empty() {
            return Err(CoreError::EmptyInput("run_sweep"));
        }
        if self.repeats < 5 {
            return Err(CoreError::Config(
                "medians need at least 5 repeats".into(),
            ));
        }
        Ok(())
    }
}

fn engine_name(fusion: FusionMode) -> &'static str {
    match fusion {
        FusionMode::Coupled => "coupled_scan",
        FusionMode::Mamba => "independent_scan",
        FusionMode::CrossAttention => "cross_attention",
        FusionMode::Average | FusionMode::Concat => "pooled_linear",
    }
}

fn random_batch(cfg: &CoupledModelConfig, b: usize, l: usize, seed: u64) -> ModalityBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModalityBatch::aligned(
        cfg.d_raw
            .iter()
            .map(|&dr| Tensor::from_fn(&[b, l, dr], |_| rng.gen_range(-1.0..1.0)))
            .collect(),
    )
}

/// Time the model forward pass for each (fusion, length). One warm-up run
/// is excluded; `repeats` timed runs produce median/min/max. Peak bytes
/// are the maximum transient allocation over the timed runs (0 unless the
/// counting allocator is installed in this process). A panicking run
/// (e.g. allocation capacity overflow) marks the record failed and the
/// sweep continues.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let mut records = Vec::new();
    for &fusion in &cfg.fusions {
        let mcfg = cfg.model_config(fusion);
        let mut store = ParameterStore::new();
        init_model_params(&mut store, &mcfg, cfg.seed)?;
        for &l in &cfg.lengths {
            let record = bench_one(&store, &mcfg, cfg, fusion, l);
            records.push(record);
        }
    }
    Ok(records)
}

fn bench_one(
    store: &ParameterStore,
    mcfg: &CoupledModelConfig,
    cfg: &SweepConfig,
    fusion: FusionMode,
    l: usize,
) -> BenchRecord {
    let mut rec = BenchRecord {
        engine: engine_name(fusion).to_string(),
        fusion: fusion.name().to_string(),
        l,
        b: cfg.batch,
        d: cfg.d_model,
        m: cfg.modalities,
        threads: 1,
        median_s: 0.0,
        min_s: 0.0,
        max_s: 0.0,
        peak_bytes: 0,
        repeats: cfg.repeats,
        failed: false,
    };
    let run = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| -> Result<_> {
        let batch = random_batch(mcfg, cfg.batch, l, cfg.seed ^ l as u64);
        // Warm-up, excluded from the statistics.
        let _ = model_forward(store, mcfg, &batch)?;
        let mut times = Vec::with_capacity(cfg.repeats);
        let mut peak = 0usize;
        for _ in 0..cfg.repeats {
            crate::alloc::reset_peak();
            let t0 = Instant::now();
            let out = model_forward(store, mcfg, &batch)?;
            let dt = t0.elapsed().as_secs_f64();
            peak = peak.max(crate::alloc::peak_since_reset());
            std::hint::black_box(&out.0);
            times.push(dt);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok((times, peak))
    }));
    match run {
        Ok(Ok((times, peak))) => {
            rec.median_s = times[times.len() / 2];
            rec.min_s = times[0];
            rec.max_s = *times.last().unwrap();
            rec.peak_bytes = peak;
        }
        _ => rec.failed = true,
    }
    rec
}

/// Least-squares slope of `log(value)` against `log(L)`.
///
/// Requires at least 4 points whose lengths span a factor of 16.
pub fn fit_scaling_exponent(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 4 {
        return Err(CoreError::InsufficientData(format!(
            "scaling fit needs >= 4 points, got {}",
            points.len()
        )));
    }
    let lmin = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let lmax = points.iter().map(|p| p.0).fold(0.0, f64::max);
    if lmax < 16.0 * lmin {
        return Err(CoreError::InsufficientData(format!(
            "scaling fit needs a 16x length span, got {lmin}..{lmax}"
        )));
    }
    if points.iter().any(|&(l, v)| l <= 0.0 || v <= 0.0) {
        return Err(CoreError::ParameterDomain {
            op: "fit_scaling_exponent",
            msg: "lengths and values must be positive".into(),
        });
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    Ok(num / den)
}
