//! Named, seeded parameter storage and the safetensors checkpoint container.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signals::corpus::stream_seed;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-bound, bound)
    Uniform(f64),
    Normal(f64),
}

impl Init {
    /// PyTorch's default for linear and conv layers.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }

    /// He-uniform, for layers followed by a ReLU.
    pub fn he(fan_in: usize) -> Self {
        Init::Uniform((6.0 / fan_in as f64).sqrt())
    }
}

/// Trainable parameters keyed by dotted path (`visual.stem.weight`).
///
/// Each parameter draws its initial values from an RNG stream derived from
/// `(seed, name)`, so values do not depend on construction order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

fn name_hash(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            seed,
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Checkpoint {
                    name: name.into(),
                    reason: format!("registered as {:?}, requested {shape:?}", v.dims()),
                });
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, name_hash(name)));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => {
                let d = Uniform::new_inclusive(-b, b).expect("finite bound");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Normal(s) => {
                let d = Normal::new(0.0, s).expect("finite std");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    pub fn num_parameters(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.vars
            .iter()
            .filter(|(n, _)| filter(n))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// SHA-256 over names, shapes and f32 values of the selected parameters.
    pub fn checksum(&self, filter: impl Fn(&str) -> bool) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.vars.iter().filter(|(n, _)| filter(n)) {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().to_dtype(DType::F32)?)))
            .collect::<Result<_>>()?;
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites every registered parameter accepted by `filter` with the
    /// checkpoint value. Shape mismatches and missing entries are reported
    /// by parameter name. Returns the names that were loaded.
    pub fn load_from(&mut self, path: &Path, filter: impl Fn(&str) -> bool) -> Result<Vec<String>> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        let mut loaded = Vec::new();
        for (name, var) in self.vars.iter().filter(|(n, _)| filter(n)) {
            let t = tensors.get(name).ok_or_else(|| Error::Checkpoint {
                name: name.clone(),
                reason: "missing from checkpoint".into(),
            })?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint {
                    name: name.clone(),
                    reason: format!("checkpoint shape {:?} != model shape {:?}", t.dims(), var.dims()),
                });
            }
            var.set(&t.to_dtype(self.dtype)?)?;
            loaded.push(name.clone());
        }
        Ok(loaded)
    }

    /// Replaces one scalar entry (flat index) of a parameter.
    pub fn set_element(&self, name: &str, index: usize, value: f64) -> Result<()> {
        let var = self.vars.get(name).ok_or_else(|| Error::Checkpoint {
            name: name.into(),
            reason: "unknown parameter".into(),
        })?;
        let mut vals = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        vals[index] = value;
        let t = Tensor::from_vec(vals, var.dims(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    pub fn element(&self, name: &str, index: usize) -> Result<f64> {
        let var = self.vars.get(name).ok_or_else(|| Error::Checkpoint {
            name: name.into(),
            reason: "unknown parameter".into(),
        })?;
        Ok(var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.get(index)?.to_scalar::<f64>()?)
    }

    /// Overwrites a whole parameter.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.vars.get(name).ok_or_else(|| Error::Checkpoint {
            name: name.into(),
            reason: "unknown parameter".into(),
        })?;
        if value.dims() != var.dims() {
            return Err(Error::Checkpoint {
                name: name.into(),
                reason: format!("assigned shape {:?} != {:?}", value.dims(), var.dims()),
            });
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// Prefix-scoped view used while building a module.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a mut ParamStore, prefix: &str) -> Self {
        Self {
            store,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.get(&full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(3, DType::F32);
        let mut b = ParamStore::new(3, DType::F32);
        a.get("x", &[4], Init::Normal(1.0)).unwrap();
        a.get("y", &[4], Init::Normal(1.0)).unwrap();
        b.get("y", &[4], Init::Normal(1.0)).unwrap();
        b.get("x", &[4], Init::Normal(1.0)).unwrap();
        assert_eq!(a.checksum(|_| true).unwrap(), b.checksum(|_| true).unwrap());
    }

    #[test]
    fn reregistering_with_other_shape_fails() {
        let mut a = ParamStore::new(0, DType::F32);
        a.get("w", &[2, 3], Init::Zeros).unwrap();
        assert!(a.get("w", &[3, 2], Init::Zeros).is_err());
        assert!(a.get("w", &[2, 3], Init::Zeros).is_ok());
    }

    #[test]
    fn save_load_round_trip_and_shape_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        let mut a = ParamStore::new(1, DType::F32);
        a.get("enc.w", &[3, 2], Init::Normal(1.0)).unwrap();
        a.save(&path).unwrap();
        let mut b = ParamStore::new(2, DType::F32);
        b.get("enc.w", &[3, 2], Init::Zeros).unwrap();
        b.load_from(&path, |_| true).unwrap();
        assert_eq!(a.checksum(|_| true).unwrap(), b.checksum(|_| true).unwrap());

        let mut c = ParamStore::new(2, DType::F32);
        c.get("enc.w", &[4, 2], Init::Zeros).unwrap();
        let err = c.load_from(&path, |_| true).unwrap_err().to_string();
        assert!(err.contains("enc.w"), "{err}");
    }
}
