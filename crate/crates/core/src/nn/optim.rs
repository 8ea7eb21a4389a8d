//! AdamW over an explicit registry of named parameters.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
    steps: i32,
}

/// Only parameters in the registry are ever written. Parameters that
/// receive no gradient in a step are left untouched (no decay either).
pub struct AdamW {
    slots: Vec<Slot>,
    cfg: AdamWConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub updated: usize,
}

impl AdamW {
    pub fn new(store: &ParamStore, filter: impl Fn(&str) -> bool, cfg: AdamWConfig) -> Result<Self> {
        let slots = store
            .vars()
            .iter()
            .filter(|(n, _)| filter(n))
            .map(|(n, var)| {
                Ok(Slot {
                    name: n.clone(),
                    var: var.clone(),
                    m: var.as_tensor().zeros_like()?,
                    v: var.as_tensor().zeros_like()?,
                    steps: 0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { slots, cfg })
    }

    pub fn registry(&self) -> Vec<&str> {
        self.slots.iter().map(|s| s.name.as_str()).collect()
    }

    /// Global L2 norm over the registered parameters' gradients.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for s in &self.slots {
            if let Some(g) = grads.get(s.var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update. With `clip`, gradients are rescaled so their global norm
    /// does not exceed it.
    pub fn step(&mut self, grads: &GradStore, lr: f64, clip: Option<f64>) -> Result<StepStats> {
        let grad_norm = self.grad_norm(grads)?;
        let scale = match clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let mut updated = 0;
        for s in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else {
                continue;
            };
            // gradients carry the forward graph; state must not keep it alive
            let g = (g.detach() * scale)?;
            s.steps += 1;
            s.m = ((&s.m * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            s.v = ((&s.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let m_hat = (&s.m * (1.0 / (1.0 - beta1.powi(s.steps))))?;
            let v_hat = (&s.v * (1.0 / (1.0 - beta2.powi(s.steps))))?;
            let theta = s.var.as_tensor().detach();
            // decay matrices only; biases and norm gains are exempt
            let decay = if theta.rank() >= 2 { lr * weight_decay } else { 0.0 };
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = ((&theta * (1.0 - decay))? - (update * lr)?)?;
            s.var.set(&next.detach())?;
            updated += 1;
        }
        Ok(StepStats { grad_norm, updated })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use candle_core::DType;

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::new(0, DType::F64);
        let w = ps.get("w", &[3], Init::Normal(1.0)).unwrap();
        let target = Tensor::new(&[1.0f64, -2.0, 0.5], ps.device()).unwrap();
        let mut opt = AdamW::new(&ps, |_| true, AdamWConfig { weight_decay: 0.0, ..Default::default() }).unwrap();
        for _ in 0..2000 {
            let loss = (&w - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), 1e-2, None).unwrap();
        }
        let err = (&w - &target).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn unregistered_parameters_are_untouched() {
        let mut ps = ParamStore::new(0, DType::F64);
        let a = ps.get("a.w", &[2, 2], Init::Normal(1.0)).unwrap();
        let b = ps.get("b.w", &[2, 2], Init::Normal(1.0)).unwrap();
        let before = ps.checksum(|n| n.starts_with("b.")).unwrap();
        let mut opt = AdamW::new(&ps, |n| n.starts_with("a."), AdamWConfig::default()).unwrap();
        assert_eq!(opt.registry(), vec!["a.w"]);
        let loss = (a.sum_all().unwrap() + b.sum_all().unwrap()).unwrap();
        let stats = opt.step(&loss.backward().unwrap(), 0.1, Some(1.0)).unwrap();
        assert_eq!(stats.updated, 1);
        assert_eq!(before, ps.checksum(|n| n.starts_with("b.")).unwrap());
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let mut ps = ParamStore::new(0, DType::F64);
        let w = ps.get("w", &[1], Init::Zeros).unwrap();
        let mut opt = AdamW::new(&ps, |_| true, AdamWConfig::default()).unwrap();
        let loss = (&w * 1e6).unwrap().sum_all().unwrap();
        let stats = opt.step(&loss.backward().unwrap(), 0.1, Some(1.0)).unwrap();
        assert!((stats.grad_norm - 1e6).abs() < 1e-6);
        // Adam's first step has magnitude lr regardless of gradient scale
        assert!((ps.element("w", 0).unwrap() + 0.1).abs() < 1e-6);
    }
}
