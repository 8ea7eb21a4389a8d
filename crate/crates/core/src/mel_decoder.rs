//! Coarse mel-spectrogram decoding and the stage-1 objective.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::ensure_finite;
use crate::nn::blocks::FftBlock;
use crate::nn::layers::{check_rank3, positional_encoding, ConvTranspose2x, LayerNorm, Linear};
use crate::nn::params::{Init, Scope};
use crate::pitch::{embed, SPEAKER_DIM};
use crate::signals::N_MELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            heads: 4,
            layers: 4,
        }
    }
}

/// E_m: visual features (×4), unit embeddings (×2), speaker vector and a
/// per-frame pitch embedding, summed at mel rate.
#[derive(Debug, Clone)]
pub struct ConditionEm {
    pub visual_proj: Linear,
    pub unit_table: Option<Tensor>,
    pub up: ConvTranspose2x,
    pub speaker_proj: Linear,
    /// Projection of `(normalized log-F0, uv)`.
    pub pitch_proj: Option<Linear>,
}

impl ConditionEm {
    pub fn new(
        s: &mut Scope,
        name: &str,
        d_visual: usize,
        codebook: usize,
        d: usize,
        use_units: bool,
        use_pitch: bool,
    ) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            visual_proj: Linear::new(&mut s, "visual_proj", d_visual, d)?,
            unit_table: if use_units {
                Some(s.get("unit_table", &[codebook, d], Init::Normal(1.0))?)
            } else {
                None
            },
            up: ConvTranspose2x::new(&mut s, "up", d, d)?,
            speaker_proj: Linear::no_bias(&mut s, "speaker_proj", SPEAKER_DIM, d)?,
            pitch_proj: if use_pitch {
                Some(Linear::new(&mut s, "pitch_proj", 2, d)?)
            } else {
                None
            },
        })
    }

    /// `upsampled: [B, T_u, D']`, `ids: [B, T_u]`, `speaker: [B, 256]`,
    /// `f0, uv: [B, T_m]` with `T_m = 2·T_u`.
    pub fn forward(
        &self,
        upsampled: &Tensor,
        ids: &Tensor,
        speaker: &Tensor,
        f0: &Tensor,
        uv: &Tensor,
    ) -> Result<Tensor> {
        let (b, t) = check_rank3(upsampled, self.visual_proj.d_in(), "E_m visual input")?;
        if ids.dims() != [b, t] {
            return Err(Error::Shape(format!("unit ids {:?} for visual [{b}, {t}]", ids.dims())));
        }
        if f0.dims() != [b, 2 * t] || uv.dims() != f0.dims() {
            return Err(Error::Shape(format!(
                "pitch {:?} / uv {:?} for {} mel frames",
                f0.dims(),
                uv.dims(),
                2 * t
            )));
        }
        let mut h = self.visual_proj.forward(upsampled)?;
        if let Some(table) = &self.unit_table {
            h = (h + embed(table, ids)?)?;
        }
        let h = self.up.forward(&h)?;
        let h = h.broadcast_add(&self.speaker_proj.forward(speaker)?.unsqueeze(1)?)?;
        match &self.pitch_proj {
            Some(p) => Ok((h + p.forward(&Tensor::stack(&[f0, uv], 2)?)?)?),
            None => Ok(h),
        }
    }
}

/// FFT-block stack with a linear head to 80 mel bins.
#[derive(Debug, Clone)]
pub struct MelDecoder {
    blocks: Vec<FftBlock>,
    ln_out: LayerNorm,
    head: Linear,
    dim: usize,
}

impl MelDecoder {
    pub fn new(s: &mut Scope, name: &str, cfg: DecoderConfig) -> Result<Self> {
        let mut s = s.sub(name);
        let blocks = (0..cfg.layers)
            .map(|i| FftBlock::new(&mut s, &format!("block{i}"), cfg.dim, cfg.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            ln_out: LayerNorm::new(&mut s, "ln_out", cfg.dim)?,
            head: Linear::new(&mut s, "head", cfg.dim, N_MELS)?,
            dim: cfg.dim,
        })
    }

    /// `[B, T_m, D_m]` to `[B, T_m, 80]`.
    pub fn forward(&self, em: &Tensor) -> Result<Tensor> {
        let (_, t) = check_rank3(em, self.dim, "mel decoder input")?;
        let mut h = em.broadcast_add(&positional_encoding(t, self.dim, em.dtype(), em.device())?)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        self.head.forward(&self.ln_out.forward(&h)?)
    }
}

/// `(1/T_m)·Σ_i ‖M_i − M̂_i‖₁` with the norm summing over bins; averaged
/// over the batch.
pub fn mel_l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!("mel {:?} vs {:?}", pred.dims(), target.dims())));
    }
    Ok((pred - target)?.abs()?.sum(D::Minus1)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Weights {
    pub lambda_unit: f64,
    pub lambda_uv: f64,
    pub lambda_f0: f64,
    pub lambda_mel: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self {
            lambda_unit: 0.1,
            lambda_uv: 1.0,
            lambda_f0: 1.0,
            lambda_mel: 1.0,
        }
    }
}

impl Stage1Weights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_unit, self.lambda_uv, self.lambda_f0, self.lambda_mel];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid(format!("loss weights must be finite and non-negative: {all:?}")));
        }
        Ok(())
    }
}

/// Weighted sum of the four stage-1 losses. A component with weight zero
/// is left out entirely.
pub fn stage1_total_loss(
    l_unit: &Tensor,
    l_uv: &Tensor,
    l_f0: &Tensor,
    l_mel: &Tensor,
    w: &Stage1Weights,
) -> Result<Tensor> {
    w.validate()?;
    let terms = [
        (l_unit, w.lambda_unit, "unit"),
        (l_uv, w.lambda_uv, "uv"),
        (l_f0, w.lambda_f0, "f0"),
        (l_mel, w.lambda_mel, "mel"),
    ];
    let mut total = l_mel.zeros_like()?;
    for (l, lambda, name) in terms {
        if lambda == 0.0 {
            continue;
        }
        ensure_finite(l, name)?;
        total = (total + (l * lambda)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::gaussian;
    use crate::nn::params::ParamStore;
    use crate::pitch::{ids_tensor, speaker_tensor};
    use candle_core::{DType, Device};

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    fn s(v: f64) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn total_loss_examples() {
        let w = Stage1Weights::default();
        let one = s(1.0);
        assert!((scalar(&stage1_total_loss(&one, &one, &one, &one, &w).unwrap()) - 3.1).abs() < 1e-12);
        let zero = s(0.0);
        assert_eq!(scalar(&stage1_total_loss(&zero, &zero, &zero, &zero, &w).unwrap()), 0.0);
        let off = Stage1Weights { lambda_unit: 0.0, ..w };
        let a = stage1_total_loss(&s(1.0), &one, &one, &one, &off).unwrap();
        let b = stage1_total_loss(&s(f64::NAN), &one, &one, &one, &off).unwrap();
        assert_eq!(scalar(&a), scalar(&b));
        assert!(stage1_total_loss(&s(f64::NAN), &one, &one, &one, &w).is_err());
        let bad = Stage1Weights { lambda_mel: -1.0, ..w };
        assert!(stage1_total_loss(&one, &one, &one, &one, &bad).is_err());
    }

    #[test]
    fn l1_examples() {
        let a = gaussian(&[1, 7, 80], 1, DType::F64).unwrap();
        assert_eq!(scalar(&mel_l1_loss(&a, &a).unwrap()), 0.0);
        let b = (&a + 1.0).unwrap();
        assert!((scalar(&mel_l1_loss(&b, &a).unwrap()) - 80.0).abs() < 1e-9);
        assert!(mel_l1_loss(&a, &a.narrow(1, 0, 6).unwrap()).is_err());
    }

    fn em_inputs() -> (Tensor, Tensor, Tensor, Tensor, Tensor) {
        (
            gaussian(&[1, 20, 8], 1, DType::F64).unwrap(),
            ids_tensor(&[(0..20).map(|i| i % 5).collect()]).unwrap(),
            speaker_tensor(&[1], DType::F64).unwrap(),
            gaussian(&[1, 40], 2, DType::F64).unwrap(),
            Tensor::ones((1, 40), DType::F64, &Device::Cpu).unwrap(),
        )
    }

    #[test]
    fn em_lattice_and_pitch_control() {
        let mut ps = ParamStore::new(0, DType::F64);
        let em = ConditionEm::new(&mut Scope::new(&mut ps, ""), "em", 8, 5, 12, true, true).unwrap();
        let (up, ids, spk, f0, uv) = em_inputs();
        let a = em.forward(&up, &ids, &spk, &f0, &uv).unwrap();
        assert_eq!(a.dims(), &[1, 40, 12]);
        let a2 = em.forward(&up, &ids, &spk, &f0, &uv).unwrap();
        assert_eq!(a.to_vec3::<f64>().unwrap(), a2.to_vec3::<f64>().unwrap());
        let p = em.pitch_proj.as_ref().unwrap();
        ps.assign("em.pitch_proj.weight", &p.weight.zeros_like().unwrap()).unwrap();
        let x = em.forward(&up, &ids, &spk, &f0, &uv).unwrap();
        let y = em.forward(&up, &ids, &spk, &(&f0 * 3.0).unwrap(), &uv.zeros_like().unwrap()).unwrap();
        assert_eq!(x.to_vec3::<f64>().unwrap(), y.to_vec3::<f64>().unwrap());
        assert!(em.forward(&up, &ids, &spk, &f0.narrow(1, 0, 38).unwrap(), &uv.narrow(1, 0, 38).unwrap()).is_err());
    }

    #[test]
    fn decoder_shape() {
        let mut ps = ParamStore::new(0, DType::F64);
        let cfg = DecoderConfig { dim: 16, heads: 2, layers: 1 };
        let dec = MelDecoder::new(&mut Scope::new(&mut ps, ""), "dec", cfg).unwrap();
        let em = gaussian(&[2, 40, 16], 3, DType::F64).unwrap();
        assert_eq!(dec.forward(&em).unwrap().dims(), &[2, 40, 80]);
    }
}
