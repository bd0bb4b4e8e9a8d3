//! Seeded parameter creation and lookup.
//!
//! Candle's CPU random generator cannot be seeded, so every parameter is drawn here from
//! a ChaCha stream. Parameters are created in construction order, which makes a model
//! built twice from the same seed bitwise identical.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Glorot/Xavier uniform using the first two dimensions as fan-out/fan-in.
    XavierUniform,
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    preset: Option<HashMap<String, Tensor>>,
}

/// Shared, prefix-scoped handle onto the parameter store.
#[derive(Clone)]
pub struct ParamBuilder {
    inner: Arc<Mutex<StoreInner>>,
    prefix: String,
    dtype: DType,
    device: Device,
}

impl ParamBuilder {
    pub fn seeded(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                preset: None,
            })),
            prefix: String::new(),
            dtype,
            device: device.clone(),
        }
    }

    /// A builder that takes every parameter from `tensors` instead of drawing it.
    pub fn from_tensors(tensors: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        let b = Self::seeded(0, dtype, device);
        b.inner.lock().unwrap().preset = Some(tensors);
        b
    }

    pub fn pp(&self, name: &str) -> Self {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        Self { inner: self.inner.clone(), prefix, dtype: self.dtype, device: self.device.clone() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        let mut inner = self.inner.lock().unwrap();
        if let Some(v) = inner.vars.get(&full) {
            return Ok(v.as_tensor().clone());
        }
        let tensor = match &inner.preset {
            Some(preset) => {
                let t = preset
                    .get(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{full}`")))?;
                if t.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{full}` has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(self.dtype)?.to_device(&self.device)?
            }
            None => {
                let n: usize = shape.iter().product();
                let bound = match init {
                    Init::Zeros => 0.0,
                    Init::Uniform(b) => b,
                    Init::XavierUniform => {
                        let fan_out = shape.first().copied().unwrap_or(1);
                        let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                        let receptive: usize = shape.iter().skip(2).product::<usize>().max(1);
                        (6.0 / (fan_in + fan_out * receptive) as f64).sqrt()
                    }
                };
                let values: Vec<f64> = (0..n)
                    .map(|_| if bound == 0.0 { 0.0 } else { inner.rng.random_range(-bound..bound) })
                    .collect();
                Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?
            }
        };
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        inner.vars.insert(full, var);
        Ok(t)
    }

    /// All parameters created so far, in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.inner.lock().unwrap().vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.inner.lock().unwrap().vars.values().map(|v| v.elem_count()).sum()
    }
}
