//! Video encoder: spatiotemporal stem, residual conv stack with global
//! pooling, and a transformer over time.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::clip::{LipClip, FRAME_SIZE};
use crate::error::{Error, Result};
use crate::nn::blocks::EncoderLayer;
use crate::nn::layers::{positional_encoding, ConvTranspose2x, LayerNorm, Linear};
use crate::nn::params::{Init, Scope};

/// Temporal extent of the stem kernel.
pub const STEM_FRAMES: usize = 5;
/// Spatial extent and stride of the stem kernel.
pub const STEM_PATCH: usize = 8;
const GRID: usize = FRAME_SIZE / STEM_PATCH;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualConfig {
    pub stem_channels: usize,
    pub res_blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Skip positional encoding and transformer layers.
    pub bypass_transformer: bool,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            stem_channels: 32,
            res_blocks: 4,
            dim: 128,
            heads: 4,
            layers: 4,
            bypass_transformer: false,
        }
    }
}

#[derive(Debug, Clone)]
struct Conv2d3 {
    weight: Tensor,
    bias: Tensor,
}

impl Conv2d3 {
    fn new(s: &mut Scope, name: &str, c: usize) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            weight: s.get("weight", &[c, c, 3, 3], Init::he(9 * c))?,
            bias: s.get("bias", &[c], Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dim(0)?;
        Ok(x.conv2d(&self.weight, 1, 1, 1, 1)?.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d3,
    conv2: Conv2d3,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        Ok((x + self.conv2.forward(&h)?)?.relu()?)
    }
}

/// `[B, T_v, 96, 96]` video to `[B, T_v, dim]` hidden features.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    stem: Linear,
    blocks: Vec<ResBlock>,
    proj: Linear,
    layers: Vec<EncoderLayer>,
    ln_out: LayerNorm,
    cfg: VisualConfig,
}

impl VisualEncoder {
    pub fn new(s: &mut Scope, name: &str, cfg: VisualConfig) -> Result<Self> {
        let mut s = s.sub(name);
        let c = cfg.stem_channels;
        let fan = STEM_FRAMES * STEM_PATCH * STEM_PATCH;
        let stem = Linear::with_init(&mut s, "stem", fan, c, Init::he(fan), Some(Init::Zeros))?;
        let blocks = (0..cfg.res_blocks)
            .map(|i| {
                let mut b = s.sub(&format!("res{i}"));
                Ok(ResBlock {
                    conv1: Conv2d3::new(&mut b, "conv1", c)?,
                    conv2: Conv2d3::new(&mut b, "conv2", c)?,
                })
            })
            .collect::<Result<_>>()?;
        let proj = Linear::with_init(&mut s, "proj", c, cfg.dim, Init::fan_in(c), Some(Init::Zeros))?;
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("layer{i}"), cfg.dim, cfg.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            stem,
            blocks,
            proj,
            layers,
            ln_out: LayerNorm::new(&mut s, "ln_out", cfg.dim)?,
            cfg,
        })
    }

    pub fn config(&self) -> VisualConfig {
        self.cfg
    }

    /// Per-frame pooled features before the transformer, `[B, T, dim]`.
    pub fn frame_features(&self, video: &Tensor) -> Result<Tensor> {
        let (b, t) = match video.dims() {
            &[b, t, h, w] if h == FRAME_SIZE && w == FRAME_SIZE && t > 0 => (b, t),
            d => {
                return Err(Error::Shape(format!(
                    "video must be [B, T, {FRAME_SIZE}, {FRAME_SIZE}], got {d:?}"
                )))
            }
        };
        let c = self.cfg.stem_channels;
        let video = standardize_frames(video)?;
        // temporal kernel 5 with same-length zero padding: stack shifted frames
        let half = STEM_FRAMES / 2;
        let padded = video.pad_with_zeros(1, half, half)?;
        let shifted = (0..STEM_FRAMES)
            .map(|j| padded.narrow(1, j, t))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let x = Tensor::stack(&shifted, 2)?; // [B, T, 5, 96, 96]
        // 8x8 stride-8 patches
        let x = x
            .reshape((b * t, STEM_FRAMES, GRID, STEM_PATCH, GRID, STEM_PATCH))?
            .permute((0, 2, 4, 1, 3, 5))?
            .reshape((b * t, GRID, GRID, STEM_FRAMES * STEM_PATCH * STEM_PATCH))?;
        let mut h = self.stem.forward(&x)?.relu()?.permute((0, 3, 1, 2))?.contiguous()?;
        let n = self.blocks.len();
        for (i, block) in self.blocks.iter().enumerate() {
            if i == n.div_ceil(2) && i > 0 {
                h = h.avg_pool2d(2)?;
            }
            h = block.forward(&h)?;
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?.reshape((b, t, c))?;
        self.proj.forward(&pooled)
    }

    pub fn forward(&self, video: &Tensor) -> Result<Tensor> {
        let h = self.frame_features(video)?;
        if self.cfg.bypass_transformer {
            return Ok(h);
        }
        let t = h.dim(1)?;
        let mut h = h.broadcast_add(&positional_encoding(t, self.cfg.dim, h.dtype(), h.device())?)?;
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        self.ln_out.forward(&h)
    }

    /// Convenience wrapper for a single clip: `[T_v, dim]`.
    pub fn encode_video(&self, clip: &LipClip, dtype: candle_core::DType) -> Result<Tensor> {
        let video = clip_tensor(&[clip], dtype)?;
        Ok(self.forward(&video)?.squeeze(0)?)
    }
}

/// Floor on the per-frame pixel standard deviation.
pub const FRAME_STD_FLOOR: f64 = 1e-3;

/// Zero mean and unit variance over the pixels of each frame.
pub fn standardize_frames(video: &Tensor) -> Result<Tensor> {
    let flat = video.flatten_from(2)?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let std = (centered.sqr()?.mean_keepdim(D::Minus1)?.sqrt()? + FRAME_STD_FLOOR)?;
    Ok(centered.broadcast_div(&std)?.reshape(video.dims())?)
}

/// Stacks equal-length clips into `[B, T_v, 96, 96]`.
pub fn clip_tensor(clips: &[&LipClip], dtype: candle_core::DType) -> Result<Tensor> {
    let Some(first) = clips.first() else {
        return Err(Error::InvalidInput("no clips".into()));
    };
    let t = first.n_frames;
    let mut data = Vec::with_capacity(clips.len() * first.frames.len());
    for c in clips {
        c.validate()?;
        if c.n_frames != t {
            return Err(Error::Shape(format!("clip lengths differ: {} vs {t}", c.n_frames)));
        }
        data.extend_from_slice(&c.frames);
    }
    let x = Tensor::from_vec(data, (clips.len(), t, FRAME_SIZE, FRAME_SIZE), &candle_core::Device::Cpu)?;
    Ok(x.to_dtype(dtype)?)
}

/// Doubles the frame rate with a stride-2 transposed convolution.
#[derive(Debug, Clone)]
pub struct TemporalUpsampler {
    pub conv: ConvTranspose2x,
}

impl TemporalUpsampler {
    pub fn new(s: &mut Scope, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            conv: ConvTranspose2x::new(s, name, d_in, d_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(x)
    }
}
