//! Named parameter storage: values, gradient buffers, Adam state, and the
//! binary checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `CSSM`, format version `u32`,
//! entry count `u32`, then per entry: name length `u32` + UTF-8 name,
//! rank `u32`, extents (`u64` each), raw `f64` scalars. Round trip is
//! bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::{fl, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"CSSM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
struct Entry<F: Scalar> {
    value: Tensor<F>,
    grad: Tensor<F>,
    m1: Tensor<F>,
    m2: Tensor<F>,
}

/// Adam hyperparameters (decoupled weight decay).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // Paper training setup: lr 5e-4, weight decay 5e-4. Betas and eps
        // are the usual Adam defaults (the paper leaves them unstated).
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore<F: Scalar = f64> {
    entries: BTreeMap<String, Entry<F>>,
    step: u64,
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>) {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter name {name}"
        );
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                grad: Tensor::zeros(&shape),
                m1: Tensor::zeros(&shape),
                m2: Tensor::zeros(&shape),
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Tensor<F> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .grad
    }

    /// Value together with its mutable gradient buffer, for backward passes
    /// that read the parameter while accumulating into its gradient.
    pub fn value_and_grad_mut(&mut self, name: &str) -> (&Tensor<F>, &mut Tensor<F>) {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        (&e.value, &mut e.grad)
    }

    /// Additive gradient accumulation; callers zero buffers between steps.
    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor<F>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        e.grad.add_inplace(g)
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(F::zero());
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn num_params(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay Adam update over every parameter, in
    /// name order. Increments the step counter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let lr = fl::<F>(cfg.lr);
        let b1 = fl::<F>(cfg.beta1);
        let b2 = fl::<F>(cfg.beta2);
        let eps = fl::<F>(cfg.eps);
        let wd = fl::<F>(cfg.weight_decay);
        let c1 = fl::<F>(1.0 - cfg.beta1.powf(t));
        let c2 = fl::<F>(1.0 - cfg.beta2.powf(t));
        let one = F::one();
        for e in self.entries.values_mut() {
            let g = e.grad.data();
            let m1 = e.m1.data_mut();
            for (m, &gi) in m1.iter_mut().zip(g) {
                *m = b1 * *m + (one - b1) * gi;
            }
            let m2 = e.m2.data_mut();
            for (v, &gi) in m2.iter_mut().zip(g) {
                *v = b2 * *v + (one - b2) * gi * gi;
            }
            let p = e.value.data_mut();
            for i in 0..p.len() {
                let mhat = e.m1.data()[i] / c1;
                let vhat = e.m2.data()[i] / c2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps) - lr * wd * p[i];
            }
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParameterStore<G> {
        let mut out = ParameterStore::new();
        for (name, e) in &self.entries {
            out.insert(name, e.value.cast());
        }
        out.step = self.step;
        out
    }
}

impl ParameterStore<f64> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_tensor_container(
            &mut w,
            self.entries.iter().map(|(k, e)| (k.as_str(), &e.value)),
            self.entries.len(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let tensors = read_tensor_container(&mut r)?;
        let mut store = Self::new();
        for (name, t) in tensors {
            store.insert(&name, t);
        }
        Ok(store)
    }
}

/// Serialize named tensors in the checkpoint container format.
pub fn write_tensor_container<'a, W: Write>(
    w: &mut W,
    tensors: impl Iterator<Item = (&'a str, &'a Tensor<f64>)>,
    count: usize,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(count as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &ext in t.shape() {
            w.write_all(&(ext as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensor_container<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<f64>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| CoreError::Checkpoint(format!("bad name: {e}")))?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
