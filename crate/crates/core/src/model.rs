//! The N-layer multi-modal model: per-modality input projections, stacked
//! fusion layers, masked two-stage mean pooling (over time, then over
//! modalities), and a linear head.
//!
//! Fusion modes:
//! - `coupled`: state-level coupling across the layer's M blocks (the
//!   fused-sum recurrence).
//! - `mamba`: the same blocks with coupling disabled — independent chains.
//! - `average` / `concat`: late fusion of pooled input projections with no
//!   state chains (the weak baselines).
//! - `cross_attention`: single-head attention fusion layers, quadratic in
//!   sequence length by construction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{single_head_attention, single_head_attention_backward};
use crate::block::{
    block_backward_uncoupled, block_finish, block_finish_backward, block_forward, block_prepare,
    block_prepare_backward, init_block_params, BlockCache, BlockDims,
};
use crate::coupled::{coupled_parallel_scan, coupled_scan_backward, CoupledScanResult,
    CoupledStateSet};
use crate::error::{CoreError, Result};
use crate::ops::{linear, linear_backward};
use crate::store::ParameterStore;
use crate::tensor::{fl, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Coupled,
    Average,
    Concat,
    Mamba,
    CrossAttention,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Coupled,
        FusionMode::Average,
        FusionMode::Concat,
        FusionMode::Mamba,
        FusionMode::CrossAttention,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::Coupled => "coupled",
            FusionMode::Average => "average",
            FusionMode::Concat => "concat",
            FusionMode::Mamba => "mamba",
            FusionMode::CrossAttention => "cross_attention",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown fusion mode '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Regression,
    Classification { classes: usize },
}

/// Model hyperparameters. Defaults follow the reference training setup:
/// model dim 128, expansion 2, conv kernel 4, state dim 64 with a
/// timescale-projection rank of state/8, and 3 layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoupledModelConfig {
    pub modalities: usize,
    /// Raw feature dimension of each modality before projection.
    pub d_raw: Vec<usize>,
    pub n_layers: usize,
    pub d_model: usize,
    pub expansion: usize,
    pub conv_kernel: usize,
    pub n_state: usize,
    pub dt_rank: usize,
    pub head: HeadKind,
    pub fusion: FusionMode,
}

impl Default for CoupledModelConfig {
    fn default() -> Self {
        Self {
            modalities: 3,
            d_raw: vec![20, 5, 10],
            n_layers: 3,
            d_model: 128,
            expansion: 2,
            conv_kernel: 4,
            n_state: 64,
            dt_rank: 8,
            head: HeadKind::Regression,
            fusion: FusionMode::Coupled,
        }
    }
}

impl CoupledModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.modalities >= 1
            && self.n_layers < usize::MAX
            && self.d_model >= 1
            && self.expansion >= 1
            && self.conv_kernel >= 1
            && self.n_state >= 1
            && self.dt_rank >= 1;
        if !dims_ok {
            return Err(CoreError::Config(
                "all model dimensions must be >= 1".into(),
            ));
        }
        if self.d_raw.len() != self.modalities {
            return Err(CoreError::Config(format!(
                "d_raw has {} entries for {} modalities",
                self.d_raw.len(),
                self.modalities
            )));
        }
        let e = self.expansion * self.d_model;
        if self.dt_rank > e {
            return Err(CoreError::Config(format!(
                "dt_rank {} exceeds inner dimension {e}",
                self.dt_rank
            )));
        }
        if let HeadKind::Classification { classes } = self.head {
            if classes < 2 {
                return Err(CoreError::Config("classification needs >= 2 classes".into()));
            }
        }
        Ok(())
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d: self.d_model,
            e: self.expansion * self.d_model,
            n: self.n_state,
            k: self.conv_kernel,
            r: self.dt_rank,
        }
    }

    /// Whether this fusion mode runs state/attention layers at all.
    pub fn has_layers(&self) -> bool {
        matches!(
            self.fusion,
            FusionMode::Coupled | FusionMode::Mamba | FusionMode::CrossAttention
        )
    }

    pub fn head_in(&self) -> usize {
        match self.fusion {
            FusionMode::Concat => self.modalities * self.d_model,
            _ => self.d_model,
        }
    }

    pub fn head_out(&self) -> usize {
        match self.head {
            HeadKind::Regression => 1,
            HeadKind::Classification { classes } => classes,
        }
    }
}

/// Per-modality input sequences projected/padded to a common `[B, L, ·]`
/// grid, with validity masks.
#[derive(Debug, Clone)]
pub struct ModalityBatch<F: Scalar = f64> {
    /// M tensors `[B, L, d_raw_m]`.
    pub inputs: Vec<Tensor<F>>,
    /// M masks `[B, L]`, 1 at valid positions, 0 at padding.
    pub masks: Vec<Tensor<F>>,
}

impl<F: Scalar> ModalityBatch<F> {
    /// All-valid masks for aligned data.
    pub fn aligned(inputs: Vec<Tensor<F>>) -> Self {
        let masks = inputs
            .iter()
            .map(|x| Tensor::filled(&[x.dim(0), x.dim(1)], F::one()))
            .collect();
        Self { inputs, masks }
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.dim(0))
    }

    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.dim(1))
    }

    pub fn is_empty(&self) -> bool {
        self.batch_size() == 0
    }

    fn validate(&self, cfg: &CoupledModelConfig) -> Result<()> {
        if self.inputs.len() != cfg.modalities || self.masks.len() != cfg.modalities {
            return Err(CoreError::Config(format!(
                "batch has {} modalities, config expects {}",
                self.inputs.len(),
                cfg.modalities
            )));
        }
        let (b, l) = (self.batch_size(), self.len());
        if b == 0 || l == 0 {
            return Err(CoreError::EmptyInput("model_forward"));
        }
        for (m, (x, mask)) in self.inputs.iter().zip(&self.masks).enumerate() {
            x.check_shape(&[b, l, cfg.d_raw[m]], "modality input")?;
            mask.check_shape(&[b, l], "modality mask")?;
        }
        Ok(())
    }
}

fn in_name(m: usize, field: &str) -> String {
    format!("in.m{m}.{field}")
}

fn block_prefix(l: usize, m: usize) -> String {
    format!("l{l}.m{m}")
}

fn att_name(l: usize, field: &str) -> String {
    format!("l{l}.att.{field}")
}

/// Create and register every parameter of the model.
pub fn init_model_params<F: Scalar>(
    store: &mut ParameterStore<F>,
    cfg: &CoupledModelConfig,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let dims = cfg.block_dims();
    let uniform = |rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize| -> Tensor<F> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| fl(rand::Rng::gen_range(rng, -bound..bound)))
    };
    for m in 0..cfg.modalities {
        store.insert(
            &in_name(m, "w"),
            uniform(&mut rng, &[cfg.d_raw[m], d], cfg.d_raw[m]),
        );
        store.insert(&in_name(m, "b"), Tensor::zeros(&[d]));
    }
    match cfg.fusion {
        FusionMode::Coupled | FusionMode::Mamba => {
            for l in 0..cfg.n_layers {
                for m in 0..cfg.modalities {
                    init_block_params(store, &block_prefix(l, m), &dims, &mut rng);
                }
            }
        }
        FusionMode::CrossAttention => {
            for l in 0..cfg.n_layers {
                for f in ["wq", "wk", "wv", "wo"] {
                    store.insert(&att_name(l, f), uniform(&mut rng, &[d, d], d));
                }
            }
        }
        FusionMode::Average | FusionMode::Concat => {}
    }
    store.insert(
        "head.w",
        uniform(&mut rng, &[cfg.head_in(), cfg.head_out()], cfg.head_in()),
    );
    store.insert("head.b", Tensor::zeros(&[cfg.head_out()]));
    Ok(())
}

/// Cache of one fusion layer's forward run.
pub enum LayerCache<F: Scalar = f64> {
    Blocks {
        caches: Vec<BlockCache<F>>,
        /// Present iff the blocks were coupled through the fused-sum scan.
        scan: Option<CoupledScanResult<F>>,
    },
    Attention {
        xs_in: Vec<Tensor<F>>,
        fused: Tensor<F>,
        q: Vec<Tensor<F>>,
        k: Tensor<F>,
        v: Tensor<F>,
        attn: Vec<Tensor<F>>,
        att_out: Vec<Tensor<F>>,
    },
}

/// One layer of M blocks over M streams. With `coupled` the per-step
/// states of all blocks are summed and fed to every block's transition;
/// otherwise each block runs its own independent scan.
pub fn coupled_layer_forward<F: Scalar>(
    store: &ParameterStore<F>,
    layer: usize,
    xs: &[Tensor<F>],
    masks: &[Tensor<F>],
    dims: &BlockDims,
    coupled: bool,
) -> Result<(Vec<Tensor<F>>, LayerCache<F>)> {
    let m = xs.len();
    if coupled {
        let mut caches = Vec::with_capacity(m);
        for (mi, x) in xs.iter().enumerate() {
            caches.push(block_prepare(
                store,
                &block_prefix(layer, mi),
                x,
                Some(&masks[mi]),
                dims,
            )?);
        }
        // Mean coupling: scale every transition factor by 1/M so the
        // fused factor Σ_m s_m/M is a convex combination of the
        // per-modality decays (each in (0, 1)). Without this the fused
        // recurrence can grow like M^t and overflows on long sequences;
        // with it M = 1 still reduces exactly to the uncoupled block.
        let inv_m = fl::<F>(1.0 / m as f64);
        for cache in &mut caches {
            for v in cache.s.data_mut() {
                *v = *v * inv_m;
            }
        }
        let (bs, e, n) = (caches[0].s.dim(0), caches[0].s.dim(2), caches[0].s.dim(3));
        let s: Vec<Tensor<F>> = caches.iter().map(|c| c.s.clone()).collect();
        let bx: Vec<Tensor<F>> = caches.iter().map(|c| c.bx.clone()).collect();
        let h0 = CoupledStateSet::zeros(m, &[bs, e, n]);
        let scan = coupled_parallel_scan(&s, &bx, &h0)?;
        let mut ys = Vec::with_capacity(m);
        for (mi, cache) in caches.iter_mut().enumerate() {
            ys.push(block_finish(
                store,
                &block_prefix(layer, mi),
                cache,
                scan.states[mi].clone(),
            )?);
        }
        Ok((
            ys,
            LayerCache::Blocks {
                caches,
                scan: Some(scan),
            },
        ))
    } else {
        let mut caches = Vec::with_capacity(m);
        let mut ys = Vec::with_capacity(m);
        for (mi, x) in xs.iter().enumerate() {
            let (y, cache, _) = block_forward(
                store,
                &block_prefix(layer, mi),
                x,
                Some(&masks[mi]),
                dims,
                None,
            )?;
            ys.push(y);
            caches.push(cache);
        }
        Ok((ys, LayerCache::Blocks { caches, scan: None }))
    }
}

/// Backward of `coupled_layer_forward`; returns per-stream input
/// gradients and accumulates parameter gradients.
pub fn coupled_layer_backward<F: Scalar>(
    store: &mut ParameterStore<F>,
    layer: usize,
    cache: &mut LayerCache<F>,
    d_ys: &[Tensor<F>],
) -> Result<Vec<Tensor<F>>> {
    let LayerCache::Blocks { caches, scan } = cache else {
        return Err(CoreError::Config("layer cache kind mismatch".into()));
    };
    let m = caches.len();
    match scan {
        Some(scan) => {
            let mut d_res = Vec::with_capacity(m);
            let mut d_h = Vec::with_capacity(m);
            for mi in 0..m {
                let (dr, dh) = block_finish_backward(
                    store,
                    &block_prefix(layer, mi),
                    &mut caches[mi],
                    &d_ys[mi],
                )?;
                d_res.push(dr);
                d_h.push(dh);
            }
            let (bs, e, n) = (caches[0].s.dim(0), caches[0].s.dim(2), caches[0].s.dim(3));
            let s: Vec<Tensor<F>> = caches.iter().map(|c| c.s.clone()).collect();
            let h0 = CoupledStateSet::zeros(m, &[bs, e, n]);
            let grads = coupled_scan_backward(&s, scan, &h0, &d_h)?;
            // The cached factors carry the 1/M mean-coupling scale, so
            // the chain back into the ZOH factors picks it up here.
            let inv_m = fl::<F>(1.0 / m as f64);
            let mut d_xs = Vec::with_capacity(m);
            for mi in 0..m {
                let d_s_zoh = grads.d_s[mi].map(|v| v * inv_m);
                let d_norm = block_prepare_backward(
                    store,
                    &block_prefix(layer, mi),
                    &caches[mi],
                    &d_s_zoh,
                    &grads.d_bx[mi],
                )?;
                let mut dx = d_res[mi].clone();
                dx.add_inplace(&d_norm)?;
                d_xs.push(dx);
            }
            Ok(d_xs)
        }
        None => {
            let mut d_xs = Vec::with_capacity(m);
            for mi in 0..m {
                d_xs.push(block_backward_uncoupled(
                    store,
                    &block_prefix(layer, mi),
                    &mut caches[mi],
                    &d_ys[mi],
                )?);
            }
            Ok(d_xs)
        }
    }
}

/// One cross-attention fusion layer: keys/values from the mean stream
/// across modalities, queries per modality, residual output projection.
fn attention_layer_forward<F: Scalar>(
    store: &ParameterStore<F>,
    layer: usize,
    xs: &[Tensor<F>],
) -> Result<(Vec<Tensor<F>>, LayerCache<F>)> {
    let m = xs.len();
    let inv_m = fl::<F>(1.0 / m as f64);
    let mut fused = xs[0].clone();
    for x in &xs[1..] {
        fused.add_inplace(x)?;
    }
    let fused = fused.scale(inv_m);
    let k = linear(&fused, store.get(&att_name(layer, "wk")), None)?;
    let v = linear(&fused, store.get(&att_name(layer, "wv")), None)?;
    let mut q = Vec::with_capacity(m);
    let mut attn = Vec::with_capacity(m);
    let mut att_out = Vec::with_capacity(m);
    let mut ys = Vec::with_capacity(m);
    for x in xs {
        let qm = linear(x, store.get(&att_name(layer, "wq")), None)?;
        let (out, a) = single_head_attention(&qm, &k, &v)?;
        let mut y = linear(&out, store.get(&att_name(layer, "wo")), None)?;
        y.add_inplace(x)?;
        ys.push(y);
        q.push(qm);
        attn.push(a);
        att_out.push(out);
    }
    Ok((
        ys,
        LayerCache::Attention {
            xs_in: xs.to_vec(),
            fused,
            q,
            k,
            v,
            attn,
            att_out,
        },
    ))
}

fn attention_layer_backward<F: Scalar>(
    store: &mut ParameterStore<F>,
    layer: usize,
    cache: &LayerCache<F>,
    d_ys: &[Tensor<F>],
) -> Result<Vec<Tensor<F>>> {
    let LayerCache::Attention {
        xs_in,
        fused,
        q,
        k,
        v,
        attn,
        att_out,
    } = cache
    else {
        return Err(CoreError::Config("layer cache kind mismatch".into()));
    };
    let m = xs_in.len();
    let inv_m = fl::<F>(1.0 / m as f64);
    let mut d_xs: Vec<Tensor<F>> = d_ys.to_vec(); // residual path
    let mut d_k_total = Tensor::zeros(k.shape());
    let mut d_v_total = Tensor::zeros(v.shape());
    for mi in 0..m {
        let (wo, wo_grad) = store.value_and_grad_mut(&att_name(layer, "wo"));
        let (d_out, d_wo, _) = linear_backward(&att_out[mi], wo, &d_ys[mi], false)?;
        wo_grad.add_inplace(&d_wo)?;
        let (dq, dk, dv) =
            single_head_attention_backward(&q[mi], k, v, &attn[mi], &d_out)?;
        d_k_total.add_inplace(&dk)?;
        d_v_total.add_inplace(&dv)?;
        let (wq, wq_grad) = store.value_and_grad_mut(&att_name(layer, "wq"));
        let (d_x, d_wq, _) = linear_backward(&xs_in[mi], wq, &dq, false)?;
        wq_grad.add_inplace(&d_wq)?;
        d_xs[mi].add_inplace(&d_x)?;
    }
    let (wk, wk_grad) = store.value_and_grad_mut(&att_name(layer, "wk"));
    let (d_fused_k, d_wk, _) = linear_backward(fused, wk, &d_k_total, false)?;
    wk_grad.add_inplace(&d_wk)?;
    let (wv, wv_grad) = store.value_and_grad_mut(&att_name(layer, "wv"));
    let (mut d_fused, d_wv, _) = linear_backward(fused, wv, &d_v_total, false)?;
    wv_grad.add_inplace(&d_wv)?;
    d_fused.add_inplace(&d_fused_k)?;
    let d_each = d_fused.scale(inv_m);
    for dx in &mut d_xs {
        dx.add_inplace(&d_each)?;
    }
    Ok(d_xs)
}

/// Masked mean over time: `[B, L, D]` to `[B, D]`, dividing by the number
/// of valid positions per batch row. Errors if any row is fully masked.
pub fn masked_mean_pool<F: Scalar>(
    x: &Tensor<F>,
    mask: &Tensor<F>,
) -> Result<(Tensor<F>, Vec<F>)> {
    let (b, l, d) = (x.dim(0), x.dim(1), x.dim(2));
    mask.check_shape(&[b, l], "pool mask")?;
    let mut pooled = Tensor::zeros(&[b, d]);
    let mut counts = Vec::with_capacity(b);
    for bi in 0..b {
        let mut cnt = F::zero();
        for t in 0..l {
            let w = mask.at2(bi, t);
            if w != F::zero() {
                cnt += F::one();
                for c in 0..d {
                    pooled.data_mut()[bi * d + c] += x.data()[(bi * l + t) * d + c];
                }
            }
        }
        if cnt == F::zero() {
            return Err(CoreError::EmptyInput("masked_mean_pool: fully masked row"));
        }
        for c in 0..d {
            pooled.data_mut()[bi * d + c] = pooled.data()[bi * d + c] / cnt;
        }
        counts.push(cnt);
    }
    Ok((pooled, counts))
}

fn masked_mean_pool_backward<F: Scalar>(
    mask: &Tensor<F>,
    counts: &[F],
    l: usize,
    d_pooled: &Tensor<F>,
) -> Tensor<F> {
    let (b, d) = (d_pooled.dim(0), d_pooled.dim(1));
    let mut dx = Tensor::zeros(&[b, l, d]);
    for bi in 0..b {
        for t in 0..l {
            if mask.at2(bi, t) != F::zero() {
                for c in 0..d {
                    dx.data_mut()[(bi * l + t) * d + c] =
                        d_pooled.data()[bi * d + c] / counts[bi];
                }
            }
        }
    }
    dx
}

/// Forward cache of the full model.
pub struct ModelCache<F: Scalar = f64> {
    /// Streams right after input projection, `[B, L, D]` each.
    pub streams0: Vec<Tensor<F>>,
    layers: Vec<LayerCache<F>>,
    /// Final per-modality streams entering the pooling stage.
    pub final_streams: Vec<Tensor<F>>,
    /// Per-modality pooled features `[B, D]`.
    pub pooled: Vec<Tensor<F>>,
    counts: Vec<Vec<F>>,
    feat: Tensor<F>,
}

/// Run the model on a batch; returns predictions `[B, head_out]` and the
/// cache needed by `model_backward`.
pub fn model_forward<F: Scalar>(
    store: &ParameterStore<F>,
    cfg: &CoupledModelConfig,
    batch: &ModalityBatch<F>,
) -> Result<(Tensor<F>, ModelCache<F>)> {
    cfg.validate()?;
    batch.validate(cfg)?;
    let m = cfg.modalities;
    let dims = cfg.block_dims();
    let mut streams: Vec<Tensor<F>> = Vec::with_capacity(m);
    for mi in 0..m {
        streams.push(linear(
            &batch.inputs[mi],
            store.get(&in_name(mi, "w")),
            Some(store.get(&in_name(mi, "b"))),
        )?);
    }
    let streams0 = streams.clone();
    let mut layers = Vec::new();
    if cfg.has_layers() {
        for l in 0..cfg.n_layers {
            let (ys, cache) = match cfg.fusion {
                FusionMode::Coupled => {
                    coupled_layer_forward(store, l, &streams, &batch.masks, &dims, true)?
                }
                FusionMode::Mamba => {
                    coupled_layer_forward(store, l, &streams, &batch.masks, &dims, false)?
                }
                FusionMode::CrossAttention => attention_layer_forward(store, l, &streams)?,
                _ => unreachable!(),
            };
            streams = ys;
            layers.push(cache);
        }
    }
    let mut pooled = Vec::with_capacity(m);
    let mut counts = Vec::with_capacity(m);
    for mi in 0..m {
        let (p, c) = masked_mean_pool(&streams[mi], &batch.masks[mi])?;
        pooled.push(p);
        counts.push(c);
    }
    let b = batch.batch_size();
    let d = cfg.d_model;
    let feat = match cfg.fusion {
        FusionMode::Concat => {
            let mut f = Tensor::zeros(&[b, m * d]);
            for (mi, p) in pooled.iter().enumerate() {
                for bi in 0..b {
                    for c in 0..d {
                        f.data_mut()[bi * m * d + mi * d + c] = p.at2(bi, c);
                    }
                }
            }
            f
        }
        _ => {
            let mut f = pooled[0].clone();
            for p in &pooled[1..] {
                f.add_inplace(p)?;
            }
            f.scale(fl(1.0 / m as f64))
        }
    };
    let preds = linear(&feat, store.get("head.w"), Some(store.get("head.b")))?;
    Ok((
        preds,
        ModelCache {
            streams0,
            layers,
            final_streams: streams,
            pooled,
            counts,
            feat,
        },
    ))
}

/// Backward of `model_forward`: accumulates parameter gradients and
/// returns per-modality gradients of the raw inputs.
pub fn model_backward<F: Scalar>(
    store: &mut ParameterStore<F>,
    cfg: &CoupledModelConfig,
    batch: &ModalityBatch<F>,
    cache: &mut ModelCache<F>,
    d_preds: &Tensor<F>,
) -> Result<Vec<Tensor<F>>> {
    let m = cfg.modalities;
    let (b, l, d) = (batch.batch_size(), batch.len(), cfg.d_model);
    let (head_w, head_w_grad) = store.value_and_grad_mut("head.w");
    let (d_feat, d_head_w, d_head_b) = linear_backward(&cache.feat, head_w, d_preds, true)?;
    head_w_grad.add_inplace(&d_head_w)?;
    store.accumulate_grad("head.b", &d_head_b.unwrap())?;
    let mut d_pooled: Vec<Tensor<F>> = Vec::with_capacity(m);
    match cfg.fusion {
        FusionMode::Concat => {
            for mi in 0..m {
                let mut g = Tensor::zeros(&[b, d]);
                for bi in 0..b {
                    for c in 0..d {
                        g.data_mut()[bi * d + c] = d_feat.data()[bi * m * d + mi * d + c];
                    }
                }
                d_pooled.push(g);
            }
        }
        _ => {
            let g = d_feat.scale(fl(1.0 / m as f64));
            for _ in 0..m {
                d_pooled.push(g.clone());
            }
        }
    }
    let mut d_streams: Vec<Tensor<F>> = (0..m)
        .map(|mi| masked_mean_pool_backward(&batch.masks[mi], &cache.counts[mi], l, &d_pooled[mi]))
        .collect();
    if cfg.has_layers() {
        for li in (0..cfg.n_layers).rev() {
            d_streams = match cfg.fusion {
                FusionMode::Coupled | FusionMode::Mamba => {
                    coupled_layer_backward(store, li, &mut cache.layers[li], &d_streams)?
                }
                FusionMode::CrossAttention => {
                    attention_layer_backward(store, li, &cache.layers[li], &d_streams)?
                }
                _ => unreachable!(),
            };
        }
    }
    let mut d_inputs = Vec::with_capacity(m);
    for mi in 0..m {
        let (w, w_grad) = store.value_and_grad_mut(&in_name(mi, "w"));
        let (dx, dw, db) = linear_backward(&batch.inputs[mi], w, &d_streams[mi], true)?;
        w_grad.add_inplace(&dw)?;
        store.accumulate_grad(&in_name(mi, "b"), &db.unwrap())?;
        d_inputs.push(dx);
    }
    Ok(d_inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{numeric_grad_scalar, rel_err};
    use rand::{Rng, SeedableRng};

    fn tiny_cfg(fusion: FusionMode) -> CoupledModelConfig {
        CoupledModelConfig {
            modalities: 2,
            d_raw: vec![3, 2],
            n_layers: 2,
            d_model: 4,
            expansion: 2,
            conv_kernel: 2,
            n_state: 2,
            dt_rank: 2,
            head: HeadKind::Regression,
            fusion,
        }
    }

    fn rand_batch(seed: u64, cfg: &CoupledModelConfig, b: usize, l: usize) -> ModalityBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = cfg
            .d_raw
            .iter()
            .map(|&dr| Tensor::from_fn(&[b, l, dr], |_| rng.gen_range(-1.0..1.0)))
            .collect();
        ModalityBatch::aligned(inputs)
    }

    fn init(cfg: &CoupledModelConfig, seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new();
        init_model_params(&mut store, cfg, seed).unwrap();
        store
    }

    #[test]
    fn coupled_forward_stays_finite_on_long_sequences() {
        // Regression: without the 1/M mean-coupling scale the fused
        // factor exceeds 1 and the state overflows around L ~ 2000.
        let cfg = tiny_cfg(FusionMode::Coupled);
        let store = init(&cfg, 9);
        let batch = rand_batch(10, &cfg, 1, 4096);
        let (preds, cache) = model_forward(&store, &cfg, &batch).unwrap();
        assert!(preds.is_finite());
        assert!(cache.final_streams.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn zero_layers_is_defined() {
        let mut cfg = tiny_cfg(FusionMode::Coupled);
        cfg.n_layers = 0;
        let store = init(&cfg, 1);
        let batch = rand_batch(2, &cfg, 2, 3);
        let (preds, _) = model_forward(&store, &cfg, &batch).unwrap();
        assert_eq!(preds.shape(), &[2, 1]);
        assert!(preds.is_finite());
    }

    #[test]
    fn output_shapes_per_fusion_mode() {
        for fusion in FusionMode::ALL {
            let mut cfg = tiny_cfg(fusion);
            cfg.head = HeadKind::Classification { classes: 3 };
            let store = init(&cfg, 3);
            let batch = rand_batch(4, &cfg, 2, 4);
            let (preds, cache) = model_forward(&store, &cfg, &batch).unwrap();
            assert_eq!(preds.shape(), &[2, 3], "{fusion:?}");
            for s in &cache.final_streams {
                assert_eq!(s.shape(), &[2, 4, cfg.d_model]);
            }
        }
    }

    #[test]
    fn decoupled_mode_is_bitwise_independent_across_modalities() {
        let cfg = tiny_cfg(FusionMode::Mamba);
        let store = init(&cfg, 5);
        let batch = rand_batch(6, &cfg, 1, 5);
        let (_, cache_a) = model_forward(&store, &cfg, &batch).unwrap();
        let mut batch2 = batch.clone();
        for v in batch2.inputs[1].data_mut() {
            *v += 0.37;
        }
        let (_, cache_b) = model_forward(&store, &cfg, &batch2).unwrap();
        assert_eq!(
            cache_a.final_streams[0].data(),
            cache_b.final_streams[0].data(),
            "modality 0 output must be bitwise unchanged"
        );
        assert_ne!(cache_a.final_streams[1].data(), cache_b.final_streams[1].data());
    }

    #[test]
    fn coupled_mode_is_causal_and_cross_modal() {
        let cfg = tiny_cfg(FusionMode::Coupled);
        let store = init(&cfg, 7);
        let l = 6;
        let t_perturb = 3;
        let batch = rand_batch(8, &cfg, 1, l);
        let (_, cache_a) = model_forward(&store, &cfg, &batch).unwrap();
        let mut batch2 = batch.clone();
        let dr = cfg.d_raw[1];
        for c in 0..dr {
            let idx = (t_perturb) * dr + c;
            batch2.inputs[1].data_mut()[idx] += 0.5;
        }
        let (_, cache_b) = model_forward(&store, &cfg, &batch2).unwrap();
        // No influence before the perturbed timestep, on any stream.
        for mi in 0..2 {
            for t in 0..t_perturb {
                for c in 0..cfg.d_model {
                    assert_eq!(
                        cache_a.final_streams[mi].at3(0, t, c),
                        cache_b.final_streams[mi].at3(0, t, c),
                        "stream {mi} leaked before t"
                    );
                }
            }
        }
        // Cross-modal influence at or after the perturbed timestep.
        let mut changed = false;
        for t in t_perturb..l {
            for c in 0..cfg.d_model {
                if cache_a.final_streams[0].at3(0, t, c)
                    != cache_b.final_streams[0].at3(0, t, c)
                {
                    changed = true;
                }
            }
        }
        assert!(changed, "coupling must propagate across modalities");
    }

    #[test]
    fn coupled_differs_from_decoupled() {
        let cfg_c = tiny_cfg(FusionMode::Coupled);
        let cfg_m = tiny_cfg(FusionMode::Mamba);
        // Identical parameters: init draws the same sequence for both.
        let store = init(&cfg_c, 9);
        let batch = rand_batch(10, &cfg_c, 1, 4);
        let (pc, _) = model_forward(&store, &cfg_c, &batch).unwrap();
        let (pm, _) = model_forward(&store, &cfg_m, &batch).unwrap();
        assert!(
            (pc.data()[0] - pm.data()[0]).abs() > 1e-12,
            "coupling must change the output on a random instance"
        );
    }

    #[test]
    fn modality_permutation_symmetry() {
        let mut cfg = tiny_cfg(FusionMode::Coupled);
        cfg.d_raw = vec![3, 3];
        let store = init(&cfg, 11);
        let batch = rand_batch(12, &cfg, 2, 4);
        let (p1, _) = model_forward(&store, &cfg, &batch).unwrap();
        // Swap the two modalities in both data and parameters.
        let batch_sw = ModalityBatch {
            inputs: vec![batch.inputs[1].clone(), batch.inputs[0].clone()],
            masks: vec![batch.masks[1].clone(), batch.masks[0].clone()],
        };
        let mut store_sw = ParameterStore::new();
        for name in store.names().map(str::to_string).collect::<Vec<_>>() {
            let swapped = if let Some(rest) = name.strip_prefix("in.m0") {
                format!("in.m1{rest}")
            } else if let Some(rest) = name.strip_prefix("in.m1") {
                format!("in.m0{rest}")
            } else if name.contains(".m0.") {
                name.replace(".m0.", ".m1.")
            } else if name.contains(".m1.") {
                name.replace(".m1.", ".m0.")
            } else {
                name.clone()
            };
            store_sw.insert(&swapped, store.get(&name).clone());
        }
        let (p2, _) = model_forward(&store_sw, &cfg, &batch_sw).unwrap();
        assert!((p1.data()[0] - p2.data()[0]).abs() <= 1e-12);
    }

    #[test]
    fn average_and_concat_coincide_for_single_modality() {
        let mut cfg_a = tiny_cfg(FusionMode::Average);
        cfg_a.modalities = 1;
        cfg_a.d_raw = vec![3];
        let mut cfg_c = cfg_a.clone();
        cfg_c.fusion = FusionMode::Concat;
        // Same seed gives identical input projections and head weights
        // (head shapes coincide when M = 1).
        let store_a = init(&cfg_a, 13);
        let store_c = init(&cfg_c, 13);
        let batch = rand_batch(14, &cfg_a, 2, 4);
        let (pa, _) = model_forward(&store_a, &cfg_a, &batch).unwrap();
        let (pc, _) = model_forward(&store_c, &cfg_c, &batch).unwrap();
        assert!((pa.data()[0] - pc.data()[0]).abs() <= 1e-12);
    }

    #[test]
    fn average_of_identical_modalities_equals_single_modality() {
        let mut cfg2 = tiny_cfg(FusionMode::Average);
        cfg2.d_raw = vec![3, 3];
        let mut store2 = init(&cfg2, 15);
        // Copy modality-0 projection into modality 1 so both streams match.
        let (w0, b0) = (store2.get("in.m0.w").clone(), store2.get("in.m0.b").clone());
        *store2.get_mut("in.m1.w") = w0;
        *store2.get_mut("in.m1.b") = b0;
        let mut cfg1 = cfg2.clone();
        cfg1.modalities = 1;
        cfg1.d_raw = vec![3];
        let mut store1 = ParameterStore::new();
        for name in ["in.m0.w", "in.m0.b", "head.w", "head.b"] {
            store1.insert(name, store2.get(name).clone());
        }
        let x = rand_batch(16, &cfg1, 2, 3);
        let batch2 = ModalityBatch {
            inputs: vec![x.inputs[0].clone(), x.inputs[0].clone()],
            masks: vec![x.masks[0].clone(), x.masks[0].clone()],
        };
        let (p2, _) = model_forward(&store2, &cfg2, &batch2).unwrap();
        let (p1, _) = model_forward(&store1, &cfg1, &x).unwrap();
        assert!((p1.data()[0] - p2.data()[0]).abs() <= 1e-12);
    }

    #[test]
    fn masked_pool_ignores_padding() {
        let x = Tensor::new(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]).unwrap();
        let mask = Tensor::new(&[1, 3], vec![1.0, 1.0, 0.0]).unwrap();
        let (p, counts) = masked_mean_pool(&x, &mask).unwrap();
        assert_eq!(p.data(), &[2.0, 3.0]);
        assert_eq!(counts, vec![2.0]);
        let all_masked = Tensor::zeros(&[1, 3]);
        assert!(masked_mean_pool(&x, &all_masked).is_err());
    }

    #[test]
    fn modality_count_mismatch_is_config_error() {
        let cfg = tiny_cfg(FusionMode::Coupled);
        let store = init(&cfg, 17);
        let mut batch = rand_batch(18, &cfg, 1, 3);
        batch.inputs.pop();
        batch.masks.pop();
        assert!(matches!(
            model_forward(&store, &cfg, &batch),
            Err(CoreError::Config(_))
        ));
    }

    fn grad_check(fusion: FusionMode, tol: f64) {
        let cfg = tiny_cfg(fusion);
        let mut store = init(&cfg, 19);
        let batch = rand_batch(20, &cfg, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let coeff = Tensor::from_fn(&[1, cfg.head_out()], |_| rng.gen_range(-1.0..1.0));
        let loss = |st: &ParameterStore, batch: &ModalityBatch| {
            let (p, _) = model_forward(st, &cfg, batch).unwrap();
            p.mul(&coeff).unwrap().sum()
        };
        let (_, mut cache) = model_forward(&store, &cfg, &batch).unwrap();
        let d_inputs = model_backward(&mut store, &cfg, &batch, &mut cache, &coeff).unwrap();
        for mi in 0..cfg.modalities {
            let num = numeric_grad_scalar(&batch.inputs[mi], 1e-5, |t| {
                let mut b2 = batch.clone();
                b2.inputs[mi] = t.clone();
                loss(&store, &b2)
            });
            assert!(
                rel_err(&d_inputs[mi], &num) < tol,
                "{fusion:?} input gradient modality {mi}"
            );
        }
        for pname in store.names().map(str::to_string).collect::<Vec<_>>() {
            let base = store.get(&pname).clone();
            let num = numeric_grad_scalar(&base, 1e-5, |t| {
                let mut st = store.clone();
                *st.get_mut(&pname) = t.clone();
                loss(&st, &batch)
            });
            assert!(
                rel_err(store.grad(&pname), &num) < tol,
                "{fusion:?} parameter gradient {pname}"
            );
        }
    }

    #[test]
    fn gradient_check_coupled() {
        grad_check(FusionMode::Coupled, 1e-4);
    }

    #[test]
    fn gradient_check_mamba() {
        grad_check(FusionMode::Mamba, 1e-4);
    }

    #[test]
    fn gradient_check_average_and_concat() {
        grad_check(FusionMode::Average, 1e-6);
        grad_check(FusionMode::Concat, 1e-6);
    }

    #[test]
    fn gradient_check_cross_attention() {
        grad_check(FusionMode::CrossAttention, 1e-4);
    }

    #[test]
    fn gradient_check_with_mask() {
        let cfg = tiny_cfg(FusionMode::Coupled);
        let mut store = init(&cfg, 23);
        let mut batch = rand_batch(24, &cfg, 2, 4);
        batch.masks[0].set2(0, 3, 0.0);
        batch.masks[1].set2(1, 2, 0.0);
        batch.masks[1].set2(1, 3, 0.0);
        let coeff = Tensor::filled(&[2, 1], 1.0);
        let loss = |st: &ParameterStore, b: &ModalityBatch| {
            model_forward(st, &cfg, b).unwrap().0.sum()
        };
        let (_, mut cache) = model_forward(&store, &cfg, &batch).unwrap();
        let d_inputs = model_backward(&mut store, &cfg, &batch, &mut cache, &coeff).unwrap();
        for mi in 0..2 {
            let num = numeric_grad_scalar(&batch.inputs[mi], 1e-5, |t| {
                let mut b2 = batch.clone();
                b2.inputs[mi] = t.clone();
                loss(&store, &b2)
            });
            assert!(rel_err(&d_inputs[mi], &num) < 1e-4, "masked modality {mi}");
        }
    }
}
