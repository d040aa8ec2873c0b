//! Training and evaluation loop over the synthetic task.
//!
//! Regression setup throughout: L1 loss on the scalar head, metrics
//! derived from thresholded predictions. Deterministic given the seed:
//! parameter init, batch shuffling, and all reduction orders are fixed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Split, SyntheticDataset};
use crate::error::{CoreError, Result};
use crate::metrics::{compute_metrics, MetricReport};
use crate::model::{init_model_params, model_backward, model_forward, CoupledModelConfig, HeadKind};
use crate::ops::{l1_loss, l1_loss_backward};
use crate::store::{AdamConfig, ParameterStore};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Reference setup: lr 5e-4, weight decay 5e-4; epochs cut to a
        // desk-scale default.
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 5e-4,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub store: ParameterStore,
    /// Validation metrics per epoch.
    pub history: Vec<MetricReport>,
    /// Test metrics of the final model.
    pub test: MetricReport,
}

/// Forward the whole split and compute metrics on the scalar predictions.
pub fn evaluate(
    store: &ParameterStore,
    cfg: &CoupledModelConfig,
    split: &Split,
) -> Result<MetricReport> {
    let (preds, _) = model_forward(store, cfg, &split.batch)?;
    compute_metrics(preds.data(), split.labels.data())
}

/// Train a fresh model on the dataset. Returns the trained parameters,
/// the per-epoch validation trajectory, and final test metrics.
pub fn train_model(
    cfg: &CoupledModelConfig,
    data: &SyntheticDataset,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !matches!(cfg.head, HeadKind::Regression) {
        return Err(CoreError::Config(
            "the synthetic training harness uses the regression head; derive \
             classes from thresholded predictions"
                .into(),
        ));
    }
    let mut store = ParameterStore::new();
    init_model_params(&mut store, cfg, tcfg.seed)?;
    let adam = tcfg.adam();
    let n = data.train.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(0x5f5f_5f5f));
    let mut history = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        idx.shuffle(&mut shuffle_rng);
        for chunk in idx.chunks(tcfg.batch_size.max(1)) {
            let mb = data.train.gather(chunk);
            let (preds, mut cache) = model_forward(&store, cfg, &mb.batch)?;
            let loss = l1_loss(&preds, &mb.labels)?;
            if !loss.is_finite() {
                return Err(CoreError::NonFinite {
                    op: "train_model",
                    detail: format!("loss diverged at epoch {epoch}"),
                });
            }
            let d_preds = l1_loss_backward(&preds, &mb.labels)?;
            store.zero_grads();
            model_backward(&mut store, cfg, &mb.batch, &mut cache, &d_preds)?;
            store.adam_step(&adam);
        }
        history.push(evaluate(&store, cfg, &data.val)?);
    }
    let test = evaluate(&store, cfg, &data.test)?;
    Ok(TrainOutcome {
        store,
        history,
        test,
    })
}

/// Mean and (population) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticTaskSpec};
    use crate::model::FusionMode;

    fn tiny_model(fusion: FusionMode, spec: &SyntheticTaskSpec) -> CoupledModelConfig {
        CoupledModelConfig {
            modalities: spec.modalities,
            d_raw: spec.d_raw.clone(),
            n_layers: 2,
            d_model: 6,
            expansion: 2,
            conv_kernel: 2,
            n_state: 2,
            dt_rank: 2,
            head: HeadKind::Regression,
            fusion,
        }
    }

    fn tiny_spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            modalities: 2,
            latent_dim: 4,
            d_raw: vec![4, 3],
            noise: vec![0.05, 0.05],
            rho: 0.3,
            seq_len: 6,
            n_train: 24,
            n_val: 8,
            n_test: 8,
            seed: 11,
            ..SyntheticTaskSpec::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged_and_metrics_constant() {
        let spec = tiny_spec();
        let data = generate_dataset(&spec).unwrap();
        let cfg = tiny_model(FusionMode::Coupled, &spec);
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 0.0,
            weight_decay: 0.0,
            seed: 5,
        };
        let out = train_model(&cfg, &data, &tcfg).unwrap();
        let mut fresh = ParameterStore::new();
        init_model_params(&mut fresh, &cfg, 5).unwrap();
        for name in fresh.names().map(str::to_string).collect::<Vec<_>>() {
            assert_eq!(out.store.get(&name).data(), fresh.get(&name).data());
        }
        for r in &out.history[1..] {
            assert_eq!(r.mae, out.history[0].mae);
            assert_eq!(r.corr, out.history[0].corr);
        }
    }

    #[test]
    fn identical_seed_reproduces_bitwise() {
        let spec = tiny_spec();
        let data = generate_dataset(&spec).unwrap();
        let cfg = tiny_model(FusionMode::Coupled, &spec);
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train_model(&cfg, &data, &tcfg).unwrap();
        let b = train_model(&cfg, &data, &tcfg).unwrap();
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.csv_fields(), y.csv_fields());
        }
        for name in a.store.names().map(str::to_string).collect::<Vec<_>>() {
            let bits = |t: &crate::tensor::Tensor| -> Vec<u64> {
                t.data().iter().map(|x| x.to_bits()).collect()
            };
            assert_eq!(bits(a.store.get(&name)), bits(b.store.get(&name)));
        }
        let c = train_model(
            &cfg,
            &data,
            &TrainConfig {
                seed: 10,
                ..tcfg.clone()
            },
        )
        .unwrap();
        assert_ne!(
            a.history.last().unwrap().csv_fields(),
            c.history.last().unwrap().csv_fields()
        );
    }

    #[test]
    fn tiny_overfit_reaches_perfect_binary_accuracy() {
        let spec = SyntheticTaskSpec {
            modalities: 2,
            latent_dim: 4,
            d_raw: vec![4, 3],
            noise: vec![0.01, 0.01],
            rho: 0.3,
            seq_len: 6,
            n_train: 8,
            n_val: 4,
            n_test: 4,
            seed: 21,
            ..SyntheticTaskSpec::default()
        };
        let data = generate_dataset(&spec).unwrap();
        let mut cfg = tiny_model(FusionMode::Coupled, &spec);
        cfg.d_model = 8;
        let tcfg = TrainConfig {
            epochs: 200,
            batch_size: 8,
            lr: 5e-3,
            weight_decay: 0.0,
            seed: 3,
        };
        let mut reached = false;
        // Re-train is expensive; instead train once and evaluate on the
        // train split at the end plus a mid-run sanity bound.
        let out = train_model(&cfg, &data, &tcfg).unwrap();
        let train_metrics = evaluate(&out.store, &cfg, &data.train).unwrap();
        if train_metrics.acc2 == 1.0 {
            reached = true;
        }
        assert!(
            reached,
            "expected perfect train Acc-2, got {}",
            train_metrics.acc2
        );
    }

    #[test]
    fn nan_input_aborts_with_diagnostic() {
        let spec = tiny_spec();
        let mut data = generate_dataset(&spec).unwrap();
        data.train.batch.inputs[0].data_mut()[0] = f64::NAN;
        let cfg = tiny_model(FusionMode::Coupled, &spec);
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let err = train_model(&cfg, &data, &tcfg).unwrap_err();
        assert!(matches!(err, CoreError::NonFinite { .. }), "{err}");
    }

    #[test]
    fn mean_std_basics() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }
}
