//! Flow-matching refinement of the coarse mel-spectrogram.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{ode_generate, rfm_loss};
use crate::nn::dit::{Dit, DitConfig};
use crate::nn::layers::{check_rank3, Linear};
use crate::nn::params::Scope;
use crate::signals::N_MELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostnetConfig {
    pub cond_dim: usize,
    pub dit: DitConfig,
}

impl Default for PostnetConfig {
    fn default() -> Self {
        Self {
            cond_dim: 128,
            dit: DitConfig {
                dim: 128,
                heads: 4,
                layers: 6,
            },
        }
    }
}

/// Linear projection of the concatenation `[coarse mel, E_m]`, kept as two
/// blocks so each slice can be inspected separately.
#[derive(Debug, Clone)]
pub struct PostnetCondition {
    pub mel_proj: Linear,
    pub em_proj: Linear,
}

impl PostnetCondition {
    pub fn new(s: &mut Scope, name: &str, d_em: usize, d: usize) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            mel_proj: Linear::new(&mut s, "mel_proj", N_MELS, d)?,
            em_proj: Linear::no_bias(&mut s, "em_proj", d_em, d)?,
        })
    }

    pub fn forward(&self, coarse: &Tensor, em: &Tensor) -> Result<Tensor> {
        let (b, t) = check_rank3(coarse, N_MELS, "coarse mel")?;
        let (eb, et) = check_rank3(em, self.em_proj.d_in(), "E_m")?;
        if (b, t) != (eb, et) {
            return Err(Error::Shape(format!("coarse [{b}, {t}] vs E_m [{eb}, {et}]")));
        }
        Ok((self.mel_proj.forward(coarse)? + self.em_proj.forward(em)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Postnet {
    pub cond: PostnetCondition,
    pub dit: Dit,
}

impl Postnet {
    pub fn new(s: &mut Scope, name: &str, cfg: PostnetConfig, d_em: usize) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            cond: PostnetCondition::new(&mut s, "cond", d_em, cfg.cond_dim)?,
            dit: Dit::new(&mut s, "dit", cfg.dit, N_MELS, cfg.cond_dim, N_MELS)?,
        })
    }

    /// `x_t: [B, T_m, 80]` to a velocity of the same shape.
    pub fn field(&self, x_t: &Tensor, t: &[f64], cond: &Tensor) -> Result<Tensor> {
        self.dit.forward(x_t, t, cond)
    }

    /// Integrates from seeded noise to a refined spectrogram.
    pub fn refine(&self, coarse: &Tensor, em: &Tensor, nfe: usize, sway: f64, seed: u64) -> Result<Tensor> {
        let cond = self.cond.forward(coarse, em)?;
        refine_with_field(coarse, nfe, sway, seed, |x, t| self.field(x, &vec![t; x.dim(0)?], &cond))
    }
}

/// Sampler plumbing with an arbitrary field, used by [`Postnet::refine`].
pub fn refine_with_field<F>(coarse: &Tensor, nfe: usize, sway: f64, seed: u64, field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    ode_generate(coarse.dims(), nfe, sway, seed, coarse.dtype(), field)
}

/// Same objective and reduction as the F0 flow.
pub fn postnet_rfm_loss(v_pred: &Tensor, x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    rfm_loss(v_pred, x0, x1)
}
