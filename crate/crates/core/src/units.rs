//! Speech-unit prediction from upsampled visual features.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::ensure_finite;
use crate::nn::blocks::ConformerBlock;
use crate::nn::layers::{check_rank3, log_softmax_last, Linear};
use crate::nn::params::Scope;
use crate::signals::UnitSequence;

pub const LABEL_SMOOTHING: f64 = 0.1;
pub const CONV_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub conv_kernel: usize,
    /// Restrict attention to the diagonal.
    pub identity_attention: bool,
    pub label_smoothing: f64,
}

impl Default for UnitConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            heads: 4,
            layers: 4,
            conv_kernel: CONV_KERNEL,
            identity_attention: false,
            label_smoothing: LABEL_SMOOTHING,
        }
    }
}

/// Conformer stack with a linear classification head.
#[derive(Debug, Clone)]
pub struct UnitPredictor {
    input: Linear,
    blocks: Vec<ConformerBlock>,
    head: Linear,
    codebook_size: usize,
}

impl UnitPredictor {
    pub fn new(s: &mut Scope, name: &str, cfg: UnitConfig, d_in: usize, codebook_size: usize) -> Result<Self> {
        let mut s = s.sub(name);
        let blocks = (0..cfg.layers)
            .map(|i| {
                ConformerBlock::new(
                    &mut s,
                    &format!("block{i}"),
                    cfg.dim,
                    cfg.heads,
                    cfg.conv_kernel,
                    cfg.identity_attention,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input: Linear::new(&mut s, "input", d_in, cfg.dim)?,
            blocks,
            head: Linear::new(&mut s, "head", cfg.dim, codebook_size)?,
            codebook_size,
        })
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    /// `[B, T_u, d_in]` to logits `[B, T_u, C]`.
    pub fn forward(&self, upsampled: &Tensor) -> Result<Tensor> {
        check_rank3(upsampled, self.input.d_in(), "unit predictor input")?;
        let mut h = self.input.forward(upsampled)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        self.head.forward(&h)
    }
}

/// `(1 − ε)·onehot + ε/C`, shape `[T_u, C]`.
pub fn smooth_targets(ids: &[u32], c: usize, epsilon: f64) -> Result<Vec<Vec<f64>>> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(invalid(format!("label smoothing {epsilon} outside [0, 1]")));
    }
    ids.iter()
        .map(|&id| {
            if id as usize >= c {
                return Err(invalid(format!("unit id {id} outside codebook of size {c}")));
            }
            let mut row = vec![epsilon / c as f64; c];
            row[id as usize] += 1.0 - epsilon;
            Ok(row)
        })
        .collect()
}

/// Smoothed targets for a batch of unit sequences, `[B, T_u, C]`.
pub fn smooth_targets_tensor(seqs: &[&UnitSequence], c: usize, epsilon: f64, dtype: DType) -> Result<Tensor> {
    let t = seqs.first().map(|s| s.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(seqs.len() * t * c);
    for s in seqs {
        if s.len() != t {
            return Err(Error::Shape("unit sequences differ in length".into()));
        }
        data.extend(smooth_targets(&s.ids, c, epsilon)?.into_iter().flatten());
    }
    Ok(Tensor::from_vec(data, (seqs.len(), t, c), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `mean_i −Σ_j q_ij · log softmax(U_i)_j` over frames and batch.
pub fn unit_ce_loss(logits: &Tensor, q: &Tensor) -> Result<Tensor> {
    if logits.dims() != q.dims() {
        return Err(Error::Shape(format!("logits {:?} vs targets {:?}", logits.dims(), q.dims())));
    }
    ensure_finite(logits, "unit logits")?;
    let per_frame = (log_softmax_last(logits)? * q)?.sum(D::Minus1)?.neg()?;
    Ok(per_frame.mean_all()?)
}

/// Framewise argmax, `[B, T_u]`.
pub fn argmax_units(logits: &Tensor) -> Result<Vec<Vec<u32>>> {
    Ok(logits.argmax(D::Minus1)?.to_dtype(DType::U32)?.to_vec2::<u32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use proptest::prelude::*;

    fn tensor(rows: &[Vec<f64>]) -> Tensor {
        let c = rows[0].len();
        Tensor::from_vec(rows.concat(), (1, rows.len(), c), &Device::Cpu).unwrap()
    }

    fn scalar(t: Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn smoothing_examples() {
        let row = &smooth_targets(&[0], 2, 0.1).unwrap()[0];
        assert!((row[0] - 0.95).abs() < 1e-15 && (row[1] - 0.05).abs() < 1e-15);
        assert_eq!(smooth_targets(&[1], 3, 0.0).unwrap(), vec![vec![0.0, 1.0, 0.0]]);
        assert!(smooth_targets(&[3], 3, 0.1).is_err());
        for row in smooth_targets(&[0, 5, 63], 64, 0.1).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ce_examples() {
        let q = tensor(&smooth_targets(&[2, 0], 64, 0.1).unwrap());
        let uniform = Tensor::zeros((1, 2, 64), DType::F64, &Device::Cpu).unwrap();
        assert!((scalar(unit_ce_loss(&uniform, &q).unwrap()) - 64f64.ln()).abs() < 1e-12);

        let logits = tensor(&[vec![3f64.ln(), 0.0]]);
        let q = tensor(&[vec![0.95, 0.05]]);
        let want = -(0.95 * 0.75f64.ln() + 0.05 * 0.25f64.ln());
        assert!((scalar(unit_ce_loss(&logits, &q).unwrap()) - want).abs() < 1e-12);
        assert!((want - 0.3426).abs() < 1e-4);

        let peaked = tensor(&[vec![50.0, 0.0]]);
        let q = tensor(&[vec![1.0, 0.0]]);
        assert!(scalar(unit_ce_loss(&peaked, &q).unwrap()) < 1e-12);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let logits = tensor(&[vec![f64::INFINITY, 0.0]]);
        assert!(unit_ce_loss(&logits, &tensor(&[vec![1.0, 0.0]])).is_err());
    }

    #[test]
    fn logits_shape() {
        let mut ps = ParamStore::new(0, DType::F64);
        let cfg = UnitConfig { dim: 16, heads: 2, layers: 1, ..Default::default() };
        let p = UnitPredictor::new(&mut Scope::new(&mut ps, ""), "units", cfg, 8, 64).unwrap();
        let x = crate::flow::gaussian(&[1, 10, 8], 1, DType::F64).unwrap();
        assert_eq!(p.forward(&x).unwrap().dims(), &[1, 10, 64]);
    }

    #[test]
    fn degenerate_config_is_time_equivariant() {
        let mut ps = ParamStore::new(2, DType::F64);
        let cfg = UnitConfig {
            dim: 16,
            heads: 2,
            layers: 2,
            conv_kernel: 1,
            identity_attention: true,
            ..Default::default()
        };
        let p = UnitPredictor::new(&mut Scope::new(&mut ps, ""), "units", cfg, 8, 12).unwrap();
        let x = crate::flow::gaussian(&[1, 6, 8], 4, DType::F64).unwrap();
        let perm = [3u32, 0, 5, 1, 4, 2];
        let idx = Tensor::new(&perm, &Device::Cpu).unwrap();
        let y_of_perm = p.forward(&x.index_select(&idx, 1).unwrap()).unwrap();
        let perm_of_y = p.forward(&x).unwrap().index_select(&idx, 1).unwrap();
        let d = (y_of_perm - perm_of_y).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar(d) < 1e-12);
    }

    proptest! {
        #[test]
        fn ce_is_shift_invariant_and_above_entropy(seed in 0u64..500, shift in -20.0f64..20.0, id in 0u32..8) {
            let logits = (crate::flow::gaussian(&[1, 1, 8], seed, DType::F64).unwrap() * 3.0).unwrap();
            let q = tensor(&smooth_targets(&[id], 8, 0.1).unwrap());
            let a = scalar(unit_ce_loss(&logits, &q).unwrap());
            let b = scalar(unit_ce_loss(&(&logits + shift).unwrap(), &q).unwrap());
            prop_assert!((a - b).abs() < 1e-9);
            let qv = smooth_targets(&[id], 8, 0.1).unwrap().remove(0);
            let entropy: f64 = -qv.iter().map(|p| p * p.ln()).sum::<f64>();
            prop_assert!(a >= entropy - 1e-12);
        }
    }
}
