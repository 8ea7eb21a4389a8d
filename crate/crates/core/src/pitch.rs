//! Pitch prediction: F0 contour by flow matching, voicing by a conv stack.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{ensure_finite, ode_generate};
use crate::nn::dit::{Dit, DitConfig};
use crate::nn::layers::{check_rank3, Conv1d, ConvTranspose2x, Linear};
use crate::nn::params::{Init, Scope};
use crate::signals::corpus::stream_seed;

pub use crate::signals::pitch::apply_uv_mask;

pub const SPEAKER_DIM: usize = 256;
pub const UV_LAYERS: usize = 5;
pub const UV_KERNEL: usize = 5;
const SPEAKER_SEED: u64 = 0x5eed_0256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PitchConfig {
    /// Width of the condition E_p.
    pub cond_dim: usize,
    pub dit: DitConfig,
    pub uv_channels: usize,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            cond_dim: 128,
            dit: DitConfig {
                dim: 128,
                heads: 4,
                layers: 4,
            },
            uv_channels: 128,
        }
    }
}

/// Fixed unit-norm identity vector for a synthetic speaker.
pub fn speaker_embedding(speaker_id: u32) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(SPEAKER_SEED, speaker_id as u64));
    let v: Vec<f64> = (0..SPEAKER_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

/// `[B, 256]` speaker embeddings.
pub fn speaker_tensor(ids: &[u32], dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = ids.iter().flat_map(|&i| speaker_embedding(i)).collect();
    Ok(Tensor::from_vec(data, (ids.len(), SPEAKER_DIM), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Matches a unit sequence to `t` frames: one surplus frame is trimmed, one
/// missing frame repeats the last id.
pub fn align_ids(ids: &[u32], t: usize) -> Result<Vec<u32>> {
    match ids.len() {
        n if n == t => Ok(ids.to_vec()),
        n if n == t + 1 => Ok(ids[..t].to_vec()),
        n if n + 1 == t && n > 0 => {
            let mut v = ids.to_vec();
            v.push(*ids.last().unwrap());
            Ok(v)
        }
        n => Err(Error::Shape(format!("{n} unit frames cannot align to {t}"))),
    }
}

/// `[B, T]` u32 id tensor from aligned sequences.
pub fn ids_tensor(seqs: &[Vec<u32>]) -> Result<Tensor> {
    let t = seqs.first().map(|s| s.len()).unwrap_or(0);
    if seqs.iter().any(|s| s.len() != t) {
        return Err(Error::Shape("unit sequences differ in length".into()));
    }
    Ok(Tensor::from_vec(seqs.concat(), (seqs.len(), t), &Device::Cpu)?)
}

/// Looks up `[B, T]` ids in a `[C, D]` table.
pub fn embed(table: &Tensor, ids: &Tensor) -> Result<Tensor> {
    let (b, t) = ids.dims2()?;
    let d = table.dim(1)?;
    Ok(table.index_select(&ids.flatten_all()?, 0)?.reshape((b, t, d))?)
}

/// E_p: upsampled visual features, unit embeddings and the speaker vector,
/// summed at unit rate and upsampled to mel rate.
#[derive(Debug, Clone)]
pub struct ConditionEp {
    pub visual_proj: Linear,
    pub unit_table: Option<Tensor>,
    pub speaker_proj: Linear,
    pub up: ConvTranspose2x,
}

impl ConditionEp {
    pub fn new(s: &mut Scope, name: &str, d_visual: usize, codebook: usize, d: usize, use_units: bool) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            visual_proj: Linear::new(&mut s, "visual_proj", d_visual, d)?,
            unit_table: if use_units {
                Some(s.get("unit_table", &[codebook, d], Init::Normal(1.0))?)
            } else {
                None
            },
            speaker_proj: Linear::no_bias(&mut s, "speaker_proj", SPEAKER_DIM, d)?,
            up: ConvTranspose2x::new(&mut s, "up", d, d)?,
        })
    }

    /// `upsampled: [B, T_u, D']`, `ids: [B, T_u]`, `speaker: [B, 256]` to `[B, 2·T_u, d]`.
    pub fn forward(&self, upsampled: &Tensor, ids: &Tensor, speaker: &Tensor) -> Result<Tensor> {
        let (b, t) = check_rank3(upsampled, self.visual_proj.d_in(), "E_p visual input")?;
        if ids.dims() != [b, t] {
            return Err(Error::Shape(format!("unit ids {:?} for visual [{b}, {t}]", ids.dims())));
        }
        let mut h = self.visual_proj.forward(upsampled)?;
        if let Some(table) = &self.unit_table {
            h = (h + embed(table, ids)?)?;
        }
        let spk = self.speaker_proj.forward(speaker)?.unsqueeze(1)?;
        self.up.forward(&h.broadcast_add(&spk)?)
    }
}

/// Five same-length convolutions (kernel 5) and a linear head.
#[derive(Debug, Clone)]
pub struct UvPredictor {
    convs: Vec<Conv1d>,
    head: Linear,
}

impl UvPredictor {
    pub fn new(s: &mut Scope, name: &str, d_in: usize, channels: usize) -> Result<Self> {
        let mut s = s.sub(name);
        let convs = (0..UV_LAYERS)
            .map(|i| Conv1d::new(&mut s, &format!("conv{i}"), if i == 0 { d_in } else { channels }, channels, UV_KERNEL))
            .collect::<Result<_>>()?;
        Ok(Self {
            convs,
            head: Linear::new(&mut s, "head", channels, 1)?,
        })
    }

    /// Voicing logits `[B, T_m]`.
    pub fn forward(&self, cond: &Tensor) -> Result<Tensor> {
        let mut h = cond.clone();
        for c in &self.convs {
            h = c.forward(&h)?.relu()?;
        }
        Ok(self.head.forward(&h)?.squeeze(2)?)
    }
}

/// Mean binary cross-entropy on logits, in the overflow-free form
/// `max(z, 0) − y·z + ln(1 + e^{−|z|})`.
pub fn bce_with_logits(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if logits.dims() != labels.dims() {
        return Err(Error::Shape(format!("logits {:?} vs labels {:?}", logits.dims(), labels.dims())));
    }
    ensure_finite(logits, "uv logits")?;
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (labels * logits)?)? + soft)?.mean_all()?)
}

/// F0 vector field: a DiT over the scalar contour conditioned on E_p.
#[derive(Debug, Clone)]
pub struct F0Flow {
    pub dit: Dit,
}

impl F0Flow {
    pub fn new(s: &mut Scope, name: &str, cfg: DitConfig, cond_dim: usize) -> Result<Self> {
        Ok(Self {
            dit: Dit::new(s, name, cfg, 1, cond_dim, 1)?,
        })
    }

    /// `x_t: [B, T_m]` to `v: [B, T_m]`.
    pub fn field(&self, x_t: &Tensor, t: &[f64], cond: &Tensor) -> Result<Tensor> {
        Ok(self.dit.forward(&x_t.unsqueeze(2)?, t, cond)?.squeeze(2)?)
    }
}

/// Normalized log-F0 contour `[B, T_m]` by solving the flow ODE.
pub fn ode_generate_f0(flow: &F0Flow, cond: &Tensor, nfe: usize, sway: f64, seed: u64) -> Result<Tensor> {
    let (b, t, _) = cond.dims3()?;
    ode_generate(&[b, t], nfe, sway, seed, cond.dtype(), |x, tv| {
        flow.field(x, &vec![tv; b], cond)
    })
}
