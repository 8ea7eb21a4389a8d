//! Diffusion transformer used as a flow-matching vector-field estimator.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{
    check_rank3, normalize, positional_encoding, timestep_features, Activation, FeedForward, Linear,
    SelfAttention, LN_EPS,
};
use super::params::Scope;
use crate::error::{Error, Result};

pub const TIME_FEATURES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
}

#[derive(Debug, Clone)]
struct DitBlock {
    attn: SelfAttention,
    ff: FeedForward,
    /// shift, scale and gate for the attention and feed-forward branches
    modulation: Linear,
}

/// `x · (1 + scale) + shift` with per-example `[B, D]` modulations.
fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let h = normalize(x, LN_EPS)?;
    Ok(h.broadcast_mul(&(scale.unsqueeze(1)? + 1.0)?)?.broadcast_add(&shift.unsqueeze(1)?)?)
}

impl DitBlock {
    fn forward(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let dim = x.dim(2)?;
        let m = self.modulation.forward(c)?;
        let part = |i: usize| m.narrow(1, i * dim, dim);
        let h = self.attn.forward(&modulate(x, &part(0)?, &part(1)?)?)?;
        let x = (x + h.broadcast_mul(&part(2)?.unsqueeze(1)?)?)?;
        let h = self.ff.forward(&modulate(&x, &part(3)?, &part(4)?)?)?;
        Ok((&x + h.broadcast_mul(&part(5)?.unsqueeze(1)?)?)?)
    }
}

/// Input projection plus additive condition, adaLN-zero blocks driven by a
/// sinusoidal time embedding, and a linear head.
#[derive(Debug, Clone)]
pub struct Dit {
    in_proj: Linear,
    cond_proj: Linear,
    t_mlp1: Linear,
    t_mlp2: Linear,
    blocks: Vec<DitBlock>,
    final_mod: Linear,
    head: Linear,
    cfg: DitConfig,
    in_dim: usize,
    cond_dim: usize,
}

impl Dit {
    pub fn new(
        s: &mut Scope,
        name: &str,
        cfg: DitConfig,
        in_dim: usize,
        cond_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let mut s = s.sub(name);
        let d = cfg.dim;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let mut b = s.sub(&format!("block{i}"));
            blocks.push(DitBlock {
                attn: SelfAttention::new(&mut b, "attn", d, cfg.heads, false)?,
                ff: FeedForward::new(&mut b, "ff", d, 4 * d, Activation::Gelu)?,
                modulation: Linear::zeros(&mut b, "modulation", d, 6 * d)?,
            });
        }
        Ok(Self {
            in_proj: Linear::new(&mut s, "in_proj", in_dim, d)?,
            cond_proj: Linear::new(&mut s, "cond_proj", cond_dim, d)?,
            t_mlp1: Linear::new(&mut s, "t_mlp1", TIME_FEATURES, d)?,
            t_mlp2: Linear::new(&mut s, "t_mlp2", d, d)?,
            blocks,
            final_mod: Linear::zeros(&mut s, "final_mod", d, 2 * d)?,
            head: Linear::new(&mut s, "head", d, out_dim)?,
            cfg,
            in_dim,
            cond_dim,
        })
    }

    pub fn config(&self) -> DitConfig {
        self.cfg
    }

    /// `x_t: [B, T, in]`, one flow time per example, `cond: [B, T, cond]`.
    pub fn forward(&self, x_t: &Tensor, t: &[f64], cond: &Tensor) -> Result<Tensor> {
        let (b, len) = check_rank3(x_t, self.in_dim, "dit input")?;
        let (cb, clen) = check_rank3(cond, self.cond_dim, "dit condition")?;
        if (cb, clen) != (b, len) || t.len() != b {
            return Err(Error::Shape(format!(
                "dit: input [{b}, {len}], condition [{cb}, {clen}], {} times",
                t.len()
            )));
        }
        let pe = positional_encoding(len, self.cfg.dim, x_t.dtype(), x_t.device())?;
        let h = (self.in_proj.forward(x_t)? + self.cond_proj.forward(cond)?)?.broadcast_add(&pe)?;
        let tf = timestep_features(t, TIME_FEATURES, x_t.dtype(), x_t.device())?;
        let temb = self.t_mlp2.forward(&self.t_mlp1.forward(&tf)?.silu()?)?;
        let c = temb.silu()?;
        let mut h = h;
        for block in &self.blocks {
            h = block.forward(&h, &c)?;
        }
        let m = self.final_mod.forward(&c)?;
        let d = self.cfg.dim;
        let h = modulate(&h, &m.narrow(1, 0, d)?, &m.narrow(1, d, d)?)?;
        self.head.forward(&h)
    }
}
