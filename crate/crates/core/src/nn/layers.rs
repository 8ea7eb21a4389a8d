//! Sequence layers over `[batch, time, channels]` tensors.
//!
//! Everything here is built from candle primitives that carry a backward
//! pass, so models composed from these layers are differentiable end to end.

use candle_core::{DType, Device, Tensor, D};

use super::params::{Init, Scope};
use crate::error::{Error, Result};

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // tanh form avoids overflow in exp for large negative inputs
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let xs = x.broadcast_sub(&m)?;
    let lse = xs.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(xs.broadcast_sub(&lse)?)
}

/// Normalizes the last dimension to zero mean and unit variance.
pub fn normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Shifts along time: `out[t] = x[t - k]` with zeros shifted in.
pub fn shift_time(x: &Tensor, k: isize) -> Result<Tensor> {
    let t = x.dim(1)?;
    Ok(match k {
        0 => x.clone(),
        k if k > 0 => x.pad_with_zeros(1, k as usize, 0)?.narrow(1, 0, t)?,
        k => x.pad_with_zeros(1, 0, (-k) as usize)?.narrow(1, (-k) as usize, t)?,
    })
}

pub fn check_rank3(x: &Tensor, channels: usize, what: &str) -> Result<(usize, usize)> {
    match x.dims() {
        &[b, t, c] if c == channels && t > 0 => Ok((b, t)),
        d => Err(Error::Shape(format!("{what}: expected [B, T, {channels}], got {d:?}"))),
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &mut Scope, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(s, name, d_in, d_out, Init::fan_in(d_in), Some(Init::fan_in(d_in)))
    }

    pub fn no_bias(s: &mut Scope, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(s, name, d_in, d_out, Init::fan_in(d_in), None)
    }

    pub fn zeros(s: &mut Scope, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(s, name, d_in, d_out, Init::Zeros, Some(Init::Zeros))
    }

    pub fn with_init(
        s: &mut Scope,
        name: &str,
        d_in: usize,
        d_out: usize,
        w: Init,
        b: Option<Init>,
    ) -> Result<Self> {
        let mut s = s.sub(name);
        let weight = s.get("weight", &[d_out, d_in], w)?;
        let bias = b.map(|b| s.get("bias", &[d_out], b)).transpose()?;
        Ok(Self { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Applies to the last dimension of a tensor of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        if d_in != self.d_in() {
            return Err(Error::Shape(format!("linear expects {} inputs, got {dims:?}", self.d_in())));
        }
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dims()[0];
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(s: &mut Scope, name: &str, dim: usize) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            gamma: s.get("gamma", &[dim], Init::Ones)?,
            beta: s.get("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(normalize(x, LN_EPS)?.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Same-length 1D convolution along time (odd kernel, zero padding).
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub proj: Linear,
    pub kernel: usize,
    pub d_in: usize,
}

impl Conv1d {
    pub fn new(s: &mut Scope, name: &str, d_in: usize, d_out: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("conv kernel must be odd, got {kernel}")));
        }
        Ok(Self {
            proj: Linear::new(s, name, kernel * d_in, d_out)?,
            kernel,
            d_in,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, t) = check_rank3(x, self.d_in, "conv1d")?;
        if self.kernel == 1 {
            return self.proj.forward(x);
        }
        let pad = self.kernel / 2;
        let xp = x.pad_with_zeros(1, pad, pad)?;
        let cols = (0..self.kernel)
            .map(|j| xp.narrow(1, j, t))
            .collect::<candle_core::Result<Vec<_>>>()?;
        self.proj.forward(&Tensor::cat(&cols, 2)?)
    }
}

/// Per-channel 1D convolution along time.
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    /// `[kernel, channels]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DepthwiseConv1d {
    pub fn new(s: &mut Scope, name: &str, channels: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("conv kernel must be odd, got {kernel}")));
        }
        let mut s = s.sub(name);
        Ok(Self {
            weight: s.get("weight", &[kernel, channels], Init::fan_in(kernel))?,
            bias: s.get("bias", &[channels], Init::fan_in(kernel))?,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, t) = check_rank3(x, self.weight.dims()[1], "depthwise conv")?;
        let k = self.kernel();
        let pad = k / 2;
        let xp = x.pad_with_zeros(1, pad, pad)?;
        let mut acc = xp.narrow(1, 0, t)?.broadcast_mul(&self.weight.get(0)?)?;
        for j in 1..k {
            acc = (acc + xp.narrow(1, j, t)?.broadcast_mul(&self.weight.get(j)?)?)?;
        }
        Ok(acc.broadcast_add(&self.bias)?)
    }
}

/// Transposed 1D convolution with kernel 4, stride 2 and padding 1, which
/// maps `T` frames to exactly `2T`.
///
/// With taps `W0..W3`, output frame `2i` is `x[i]·W1 + x[i-1]·W3` and frame
/// `2i+1` is `x[i]·W2 + x[i+1]·W0`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2x {
    /// `[4, d_in, d_out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvTranspose2x {
    pub fn new(s: &mut Scope, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let mut s = s.sub(name);
        // each output frame sees two taps
        let init = Init::fan_in(2 * d_in);
        Ok(Self {
            weight: s.get("weight", &[4, d_in, d_out], init)?,
            bias: s.get("bias", &[d_out], init)?,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[2]
    }

    /// Kernel taps `[0, 1, 1, 0]` on the channel diagonal; output repeats
    /// each input frame twice.
    pub fn interleave_kernel(channels: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let eye = Tensor::eye(channels, dtype, device)?;
        let zero = eye.zeros_like()?;
        Ok(Tensor::stack(&[&zero, &eye, &eye, &zero], 0)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t) = check_rank3(x, self.d_in(), "transposed conv")?;
        let tap = |k: usize, x: &Tensor| -> Result<Tensor> {
            let w = self.weight.get(k)?;
            Ok(x.reshape((b * t, self.d_in()))?.matmul(&w)?.reshape((b, t, self.d_out()))?)
        };
        let even = (tap(1, x)? + tap(3, &shift_time(x, 1)?)?)?;
        let odd = (tap(2, x)? + tap(0, &shift_time(x, -1)?)?)?;
        let y = Tensor::stack(&[even, odd], 2)?.reshape((b, 2 * t, self.d_out()))?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Multi-head self-attention.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    /// Each position attends only to itself.
    pub identity_mask: bool,
}

impl SelfAttention {
    pub fn new(s: &mut Scope, name: &str, dim: usize, heads: usize, identity_mask: bool) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let mut s = s.sub(name);
        Ok(Self {
            qkv: Linear::new(&mut s, "qkv", dim, 3 * dim)?,
            out: Linear::new(&mut s, "out", dim, dim)?,
            heads,
            identity_mask,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dim = self.out.d_in();
        let (b, t) = check_rank3(x, dim, "attention")?;
        let qkv = self.qkv.forward(x)?;
        let v = qkv.narrow(2, 2 * dim, dim)?;
        if self.identity_mask {
            return self.out.forward(&v);
        }
        let dh = dim / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(qkv.narrow(2, 0, dim)?)?;
        let k = split(qkv.narrow(2, dim, dim)?)?;
        let v = split(v)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        let att = softmax_last(&scores)?.matmul(&v)?;
        let merged = att.transpose(1, 2)?.contiguous()?.reshape((b, t, dim))?;
        self.out.forward(&merged)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Gelu => x.gelu()?,
            Activation::Silu => x.silu()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new(s: &mut Scope, name: &str, dim: usize, hidden: usize, act: Activation) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            up: Linear::new(&mut s, "up", dim, hidden)?,
            down: Linear::new(&mut s, "down", hidden, dim)?,
            act,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.act.apply(&self.up.forward(x)?)?)
    }
}

/// Sinusoidal positional encoding `[t, dim]`.
pub fn positional_encoding(t: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f64; t * dim];
    for pos in 0..t {
        for i in 0..dim {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let a = pos as f64 * rate;
            data[pos * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Ok(Tensor::from_vec(data, (t, dim), device)?.to_dtype(dtype)?)
}

/// Sinusoidal features of flow times `t ∈ [0, 1]`, shape `[B, dim]`.
pub fn timestep_features(t: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        let scaled = 1000.0 * tv;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| scaled * f).collect();
        data.extend(args.iter().map(|a| a.cos()));
        data.extend(args.iter().map(|a| a.sin()));
    }
    Ok(Tensor::from_vec(data, (t.len(), 2 * half), device)?.to_dtype(dtype)?)
}
