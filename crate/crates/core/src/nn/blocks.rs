//! Transformer block variants used by the encoders and decoders.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::layers::{
    check_rank3, sigmoid, Activation, Conv1d, DepthwiseConv1d, FeedForward, LayerNorm, SelfAttention,
};
use super::params::Scope;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackDims {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(s: &mut Scope, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            ln1: LayerNorm::new(&mut s, "ln1", dim)?,
            attn: SelfAttention::new(&mut s, "attn", dim, heads, false)?,
            ln2: LayerNorm::new(&mut s, "ln2", dim)?,
            ff: FeedForward::new(&mut s, "ff", dim, 4 * dim, Activation::Gelu)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        Ok((&x + self.ff.forward(&self.ln2.forward(&x)?)?)?)
    }
}

/// Pre-norm FFT block: self-attention plus a convolutional feed-forward
/// (kernel 9 then kernel 1).
#[derive(Debug, Clone)]
pub struct FftBlock {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    conv1: Conv1d,
    conv2: Conv1d,
}

pub const FFT_KERNEL: usize = 9;

impl FftBlock {
    pub fn new(s: &mut Scope, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            ln1: LayerNorm::new(&mut s, "ln1", dim)?,
            attn: SelfAttention::new(&mut s, "attn", dim, heads, false)?,
            ln2: LayerNorm::new(&mut s, "ln2", dim)?,
            conv1: Conv1d::new(&mut s, "conv1", dim, 2 * dim, FFT_KERNEL)?,
            conv2: Conv1d::new(&mut s, "conv2", 2 * dim, dim, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let h = self.conv1.forward(&self.ln2.forward(&x)?)?.relu()?;
        Ok((&x + self.conv2.forward(&h)?)?)
    }
}

#[derive(Debug, Clone)]
struct ConformerFf {
    ln: LayerNorm,
    ff: FeedForward,
}

impl ConformerFf {
    fn new(s: &mut Scope, name: &str, dim: usize) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            ln: LayerNorm::new(&mut s, "ln", dim)?,
            ff: FeedForward::new(&mut s, "ff", dim, 4 * dim, Activation::Silu)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.ff.forward(&self.ln.forward(x)?)
    }
}

/// Conformer block: half-step FF, self-attention, convolution module,
/// half-step FF, final layer norm.
///
/// The convolution module is pointwise conv + GLU, depthwise conv, layer
/// norm, SiLU and a second pointwise conv.
#[derive(Debug, Clone)]
pub struct ConformerBlock {
    ff1: ConformerFf,
    ln_attn: LayerNorm,
    attn: SelfAttention,
    ln_conv: LayerNorm,
    pw1: Conv1d,
    dw: DepthwiseConv1d,
    ln_dw: LayerNorm,
    pw2: Conv1d,
    ff2: ConformerFf,
    ln_out: LayerNorm,
    dim: usize,
}

impl ConformerBlock {
    pub fn new(
        s: &mut Scope,
        name: &str,
        dim: usize,
        heads: usize,
        conv_kernel: usize,
        identity_attention: bool,
    ) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            ff1: ConformerFf::new(&mut s, "ff1", dim)?,
            ln_attn: LayerNorm::new(&mut s, "ln_attn", dim)?,
            attn: SelfAttention::new(&mut s, "attn", dim, heads, identity_attention)?,
            ln_conv: LayerNorm::new(&mut s, "ln_conv", dim)?,
            pw1: Conv1d::new(&mut s, "pw1", dim, 2 * dim, 1)?,
            dw: DepthwiseConv1d::new(&mut s, "dw", dim, conv_kernel)?,
            ln_dw: LayerNorm::new(&mut s, "ln_dw", dim)?,
            pw2: Conv1d::new(&mut s, "pw2", dim, dim, 1)?,
            ff2: ConformerFf::new(&mut s, "ff2", dim)?,
            ln_out: LayerNorm::new(&mut s, "ln_out", dim)?,
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_rank3(x, self.dim, "conformer")?;
        let x = (x + (self.ff1.forward(x)? * 0.5)?)?;
        let x = (&x + self.attn.forward(&self.ln_attn.forward(&x)?)?)?;
        let g = self.pw1.forward(&self.ln_conv.forward(&x)?)?;
        let glu = (g.narrow(2, 0, self.dim)? * sigmoid(&g.narrow(2, self.dim, self.dim)?)?)?;
        let c = self.ln_dw.forward(&self.dw.forward(&glu)?)?.silu()?;
        let x = (&x + self.pw2.forward(&c)?)?;
        let x = (&x + (self.ff2.forward(&x)? * 0.5)?)?;
        self.ln_out.forward(&x)
    }
}
