//! Synthetic multi-modal sequence datasets with a controllable
//! cross-modal complementarity knob.
//!
//! A shared AR(1) latent process drives all modalities. The first M latent
//! coordinates are private (coordinate m observed only by modality m); the
//! rest are shared and observed by every modality. The regression label
//! mixes a linear function of the shared coordinates (weight `1 - rho`)
//! with per-timestep products of private coordinates from different
//! modalities (weight `rho`). At `rho = 1` no single modality carries any
//! label information; at `rho = 0` each modality alone suffices.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::ModalityBatch;
use crate::store::{read_tensor_container, write_tensor_container};
use crate::tensor::Tensor;

/// AR(1) coefficient of the latent process.
const AR_COEFF: f64 = 0.8;
/// Label clamp range (sentiment-style scale).
const LABEL_RANGE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub modalities: usize,
    pub latent_dim: usize,
    /// Observation dimension per modality.
    pub d_raw: Vec<usize>,
    /// Observation noise level per modality.
    pub noise: Vec<f64>,
    /// Complementarity knob in [0, 1]: fraction of label weight on
    /// cross-modal products invisible to any single modality.
    pub rho: f64,
    /// Maximum sequence length L.
    pub seq_len: usize,
    /// Unaligned mode: per-modality lengths drawn from [min_len, L].
    pub unaligned: bool,
    pub min_len: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            modalities: 3,
            latent_dim: 8,
            d_raw: vec![20, 5, 10],
            noise: vec![0.1, 0.1, 0.1],
            rho: 0.5,
            seq_len: 32,
            unaligned: false,
            min_len: 16,
            n_train: 2000,
            n_val: 400,
            n_test: 400,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let m = self.modalities;
        if m < 1 || self.latent_dim < 1 || self.seq_len < 1 {
            return Err(CoreError::Config("spec dimensions must be >= 1".into()));
        }
        if self.d_raw.len() != m || self.noise.len() != m {
            return Err(CoreError::Config(
                "d_raw and noise must have one entry per modality".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(CoreError::Config("rho must lie in [0, 1]".into()));
        }
        if self.rho > 0.0 && self.latent_dim < m {
            return Err(CoreError::Config(format!(
                "rho > 0 needs latent_dim >= modalities ({} < {m})",
                self.latent_dim
            )));
        }
        if self.rho > 0.0 && m < 2 {
            return Err(CoreError::Config(
                "cross-modal products need at least 2 modalities".into(),
            ));
        }
        if self.rho < 1.0 && self.latent_dim < m + 1 {
            return Err(CoreError::Config(
                "rho < 1 needs at least one shared latent coordinate (latent_dim > modalities)"
                    .into(),
            ));
        }
        if self.unaligned && (self.min_len < 1 || self.min_len > self.seq_len) {
            return Err(CoreError::Config(
                "unaligned mode needs 1 <= min_len <= seq_len".into(),
            ));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(CoreError::Config("all splits must be non-empty".into()));
        }
        Ok(())
    }

    fn shared_dim(&self) -> usize {
        self.latent_dim - self.modalities.min(self.latent_dim)
    }
}

/// One split: a full-size batch plus regression labels `[n, 1]`.
#[derive(Debug, Clone)]
pub struct Split {
    pub batch: ModalityBatch,
    pub labels: Tensor,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gather the given sample rows into a minibatch.
    pub fn gather(&self, idx: &[usize]) -> Split {
        let m = self.batch.inputs.len();
        let l = self.batch.len();
        let mut inputs = Vec::with_capacity(m);
        let mut masks = Vec::with_capacity(m);
        for mi in 0..m {
            let d = self.batch.inputs[mi].dim(2);
            let src = self.batch.inputs[mi].data();
            let srcm = self.batch.masks[mi].data();
            let mut x = Tensor::zeros(&[idx.len(), l, d]);
            let mut mask = Tensor::zeros(&[idx.len(), l]);
            for (row, &i) in idx.iter().enumerate() {
                x.data_mut()[row * l * d..(row + 1) * l * d]
                    .copy_from_slice(&src[i * l * d..(i + 1) * l * d]);
                mask.data_mut()[row * l..(row + 1) * l]
                    .copy_from_slice(&srcm[i * l..(i + 1) * l]);
            }
            inputs.push(x);
            masks.push(mask);
        }
        let mut labels = Tensor::zeros(&[idx.len(), 1]);
        for (row, &i) in idx.iter().enumerate() {
            labels.data_mut()[row] = self.labels.data()[i];
        }
        Split {
            batch: ModalityBatch { inputs, masks },
            labels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticTaskSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

struct RawSample {
    /// Latent trajectory, row-major `[L, K]`.
    z: Vec<f64>,
    /// Per-modality valid length.
    lens: Vec<usize>,
}

/// Deterministic dataset generation; splits are disjoint contiguous runs
/// of one sample stream. Label standardization uses train-split statistics.
pub fn generate_dataset(spec: &SyntheticTaskSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.modalities;
    let k = spec.latent_dim;
    let l = spec.seq_len;
    let shared = spec.shared_dim();
    let normal = StandardNormal;
    // Fixed mixing weights, drawn once per dataset.
    let w_obs: Vec<Tensor> = (0..m)
        .map(|mi| {
            let vis = 1 + shared;
            Tensor::from_fn(&[vis, spec.d_raw[mi]], |_| {
                let g: f64 = normal.sample(&mut rng);
                g / (vis as f64).sqrt()
            })
        })
        .collect();
    let w_shared: Vec<f64> = (0..shared).map(|_| normal.sample(&mut rng)).collect();
    let w_pair: Vec<f64> = (0..m).map(|_| normal.sample(&mut rng)).collect();

    let n_total = spec.n_train + spec.n_val + spec.n_test;
    let mut samples = Vec::with_capacity(n_total);
    let mut raw_scores = Vec::with_capacity(n_total);
    let ar2 = (1.0 - AR_COEFF * AR_COEFF).sqrt();
    for _ in 0..n_total {
        let mut z = vec![0.0f64; l * k];
        for j in 0..k {
            z[j] = normal.sample(&mut rng);
        }
        for t in 1..l {
            for j in 0..k {
                let e: f64 = normal.sample(&mut rng);
                z[t * k + j] = AR_COEFF * z[(t - 1) * k + j] + ar2 * e;
            }
        }
        let lens: Vec<usize> = (0..m)
            .map(|_| {
                if spec.unaligned {
                    rng.gen_range(spec.min_len..=spec.seq_len)
                } else {
                    spec.seq_len
                }
            })
            .collect();
        // Unimodal part: linear in the time-averaged shared coordinates.
        // Averages run over the shortest valid window so every modality
        // observes the full label-relevant span.
        let horizon = *lens.iter().min().unwrap();
        let mut u = 0.0;
        for (sj, &w) in w_shared.iter().enumerate() {
            let j = m + sj;
            let mean: f64 =
                (0..horizon).map(|t| z[t * k + j]).sum::<f64>() / horizon as f64;
            u += w * mean;
        }
        // Cross part: ring products of private coordinates.
        let mut c = 0.0;
        if spec.rho > 0.0 {
            for mi in 0..m {
                let mj = (mi + 1) % m;
                let mean: f64 = (0..horizon)
                    .map(|t| z[t * k + mi] * z[t * k + mj])
                    .sum::<f64>()
                    / horizon as f64;
                c += w_pair[mi] * mean;
            }
        }
        raw_scores.push((u, c));
        samples.push(RawSample { z, lens });
    }
    // Standardize each label component on the train split, then mix.
    let stats = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let xs: Vec<f64> = raw_scores[..spec.n_train].iter().map(f).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        (mean, var.sqrt().max(1e-12))
    };
    let (mu_u, sd_u) = stats(&|s| s.0);
    let (mu_c, sd_c) = stats(&|s| s.1);
    let labels: Vec<f64> = raw_scores
        .iter()
        .map(|&(u, c)| {
            let score = (1.0 - spec.rho) * (u - mu_u) / sd_u + spec.rho * (c - mu_c) / sd_c;
            (score * LABEL_RANGE / 2.0).clamp(-LABEL_RANGE, LABEL_RANGE)
        })
        .collect();

    // Observations: project visible coordinates, add noise, pad with mask.
    let build_split = |samples: &[RawSample], labels: &[f64], rng: &mut ChaCha8Rng| -> Split {
        let n = samples.len();
        let mut inputs = Vec::with_capacity(m);
        let mut masks = Vec::with_capacity(m);
        for mi in 0..m {
            let d = spec.d_raw[mi];
            let mut x = Tensor::zeros(&[n, l, d]);
            let mut mask = Tensor::zeros(&[n, l]);
            for (si, s) in samples.iter().enumerate() {
                for t in 0..s.lens[mi] {
                    mask.set2(si, t, 1.0);
                    for c in 0..d {
                        let mut acc = 0.0;
                        // visible coordinate 0: private coordinate mi
                        acc += s.z[t * k + mi] * w_obs[mi].at2(0, c);
                        for sj in 0..shared {
                            acc += s.z[t * k + m + sj] * w_obs[mi].at2(1 + sj, c);
                        }
                        let e: f64 = StandardNormal.sample(rng);
                        x.set3(si, t, c, acc + spec.noise[mi] * e);
                    }
                }
            }
            inputs.push(x);
            masks.push(mask);
        }
        let lab = Tensor::new(&[n, 1], labels.to_vec()).unwrap();
        Split {
            batch: ModalityBatch { inputs, masks },
            labels: lab,
        }
    };
    let (a, b) = (spec.n_train, spec.n_train + spec.n_val);
    let train = build_split(&samples[..a], &labels[..a], &mut rng);
    let val = build_split(&samples[a..b], &labels[a..b], &mut rng);
    let test = build_split(&samples[b..], &labels[b..], &mut rng);
    Ok(SyntheticDataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

/// Write the dataset as a tensor container plus a TOML sidecar with the
/// generating spec (paths: `<stem>.cssm`, `<stem>.toml`).
pub fn export_dataset(ds: &SyntheticDataset, stem: &Path) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (split_name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        for (mi, (x, mask)) in split
            .batch
            .inputs
            .iter()
            .zip(&split.batch.masks)
            .enumerate()
        {
            tensors.push((format!("{split_name}.m{mi}.x"), x));
            tensors.push((format!("{split_name}.m{mi}.mask"), mask));
        }
        tensors.push((format!("{split_name}.labels"), &split.labels));
    }
    let mut w = BufWriter::new(File::create(stem.with_extension("cssm"))?);
    let count = tensors.len();
    write_tensor_container(&mut w, tensors.iter().map(|(n, t)| (n.as_str(), *t)), count)?;
    let sidecar = toml::to_string_pretty(&ds.spec)
        .map_err(|e| CoreError::Config(format!("spec serialization: {e}")))?;
    std::fs::write(stem.with_extension("toml"), sidecar)?;
    Ok(())
}

pub fn import_dataset(stem: &Path) -> Result<SyntheticDataset> {
    let sidecar = std::fs::read_to_string(stem.with_extension("toml"))?;
    let spec: SyntheticTaskSpec = toml::from_str(&sidecar)
        .map_err(|e| CoreError::Config(format!("spec sidecar parse: {e}")))?;
    let mut r = BufReader::new(File::open(stem.with_extension("cssm"))?);
    let tensors = read_tensor_container(&mut r)?;
    let find = |name: &str| -> Result<Tensor> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| CoreError::Checkpoint(format!("dataset missing tensor '{name}'")))
    };
    let load_split = |split_name: &str| -> Result<Split> {
        let mut inputs = Vec::new();
        let mut masks = Vec::new();
        for mi in 0..spec.modalities {
            inputs.push(find(&format!("{split_name}.m{mi}.x"))?);
            masks.push(find(&format!("{split_name}.m{mi}.mask"))?);
        }
        Ok(Split {
            batch: ModalityBatch { inputs, masks },
            labels: find(&format!("{split_name}.labels"))?,
        })
    };
    Ok(SyntheticDataset {
        train: load_split("train")?,
        val: load_split("val")?,
        test: load_split("test")?,
        spec,
    })
}
