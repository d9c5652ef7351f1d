use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    /// Normal with the given standard deviation.
    Normal(f64),
}

/// Named trainable variables.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
}

fn name_hash(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn init_values(init: Init, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Uniform(b) => (0..n).map(|_| rng.random_range(-1.0..1.0) * b).collect(),
        Init::Normal(s) => (0..n)
            .map(|_| {
                // Box-Muller
                let u1: f64 = rng.random_range(f64::EPSILON..1.0);
                let u2: f64 = rng.random();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * s
            })
            .collect(),
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), seed, dtype }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Creates (or returns the existing) parameter `name`.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n = shape.iter().product();
        let values = init_values(init, n, name_hash(self.seed, name));
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter with host values.
    pub fn set(&self, name: &str, values: &[f32]) -> Result<()> {
        let var = self.vars.get(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.elem_count() != values.len() {
            return Err(Error::Shape(format!(
                "parameter {name} has {} values, got {}",
                var.elem_count(),
                values.len()
            )));
        }
        let t = Tensor::from_slice(values, var.dims(), &Device::Cpu)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    pub fn set_tensor(&self, name: &str, t: &Tensor) -> Result<()> {
        let var = self.vars.get(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        var.set(&t.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Host copy of a parameter.
    pub fn values(&self, name: &str) -> Result<Vec<f32>> {
        let var = self.vars.get(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        super::to_host(var.as_tensor())
    }

    /// Re-draws every parameter under `prefix` with a salted seed, keeping
    /// each parameter's original distribution family inferred from `init`.
    pub fn reinit(&self, prefix: &str, salt: u64, init: impl Fn(&str, &[usize]) -> Init) -> Result<usize> {
        let mut n = 0;
        for (name, var) in self.vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let values = init_values(init(name, var.dims()), var.elem_count(), name_hash(self.seed ^ salt, name));
            let t = Tensor::from_vec(values, var.dims(), &Device::Cpu)?.to_dtype(self.dtype)?;
            var.set(&t)?;
            n += 1;
        }
        Ok(n)
    }

    /// Copies every `from`-prefixed parameter onto the parameter with the
    /// prefix replaced by `to`.
    pub fn copy_prefix(&self, from: &str, to: &str) -> Result<usize> {
        let mut n = 0;
        for (name, var) in self.vars.iter().filter(|(k, _)| k.starts_with(from)) {
            let target = format!("{to}{}", &name[from.len()..]);
            let dst = self.vars.get(&target).ok_or_else(|| Error::Shape(format!("no parameter {target}")))?;
            dst.set(&var.as_tensor().copy()?)?;
            n += 1;
        }
        Ok(n)
    }
}
