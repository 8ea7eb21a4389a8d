//! Log-mel features: 640-sample Hann window, 160-sample hop, 1024-point FFT,
//! 80 triangular HTK-mel filters over 0-8000 Hz, natural log of power + floor.

use std::sync::OnceLock;

use rustfft::{num_complex::Complex, FftPlanner};

use super::audio::{centered_frames, AudioWave, SAMPLE_RATE, WIN};
use crate::error::{invalid, Error, Result};
use crate::io::Array;

pub const N_MELS: usize = 80;
pub const N_FFT: usize = 1024;
pub const MEL_FLOOR: f64 = 1e-5;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = 8000.0;

/// Log-mel matrix, row-major `[n_frames x 80]`, 100 frames per second.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub data: Vec<f32>,
    pub n_frames: usize,
}

impl MelSpectrogram {
    pub fn new(data: Vec<f32>, n_frames: usize) -> Result<Self> {
        if data.len() != n_frames * N_MELS {
            return Err(Error::Shape(format!(
                "mel data has {} values, expected {n_frames} x {N_MELS}",
                data.len()
            )));
        }
        Ok(Self { data, n_frames })
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * N_MELS..(i + 1) * N_MELS]
    }

    /// Keeps the first `n` frames.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.n_frames);
        Self {
            data: self.data[..n * N_MELS].to_vec(),
            n_frames: n,
        }
    }

    pub fn to_array(&self) -> Array {
        Array {
            dims: vec![self.n_frames, N_MELS],
            data: self.data.clone(),
        }
    }

    pub fn from_array(a: Array) -> Result<Self> {
        if a.dims.len() != 2 || a.dims[1] != N_MELS {
            return Err(Error::Shape(format!("mel array dims {:?}", a.dims)));
        }
        Self::new(a.data, a.dims[0])
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequency (Hz) of each mel filter.
pub fn filter_centers_hz() -> Vec<f64> {
    mel_edges_hz()[1..=N_MELS].to_vec()
}

fn mel_edges_hz() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(F_MIN), hz_to_mel(F_MAX));
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Peak-normalized triangular filters, `[80][N_FFT/2 + 1]`.
pub fn filterbank() -> &'static [Vec<f64>] {
    static FB: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    FB.get_or_init(|| {
        let edges = mel_edges_hz();
        let n_bins = N_FFT / 2 + 1;
        (0..N_MELS)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
                        if f <= l || f >= r {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (r - f) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect()
    })
}

pub(crate) fn hann() -> &'static [f64] {
    static W: OnceLock<Vec<f64>> = OnceLock::new();
    W.get_or_init(|| {
        (0..WIN)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WIN as f64).cos())
            .collect()
    })
}

/// Power spectrum of every centered frame, `[n_frames][N_FFT/2 + 1]`.
pub(crate) fn power_frames(samples: &[f32]) -> Vec<Vec<f64>> {
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let window = hann();
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    centered_frames(samples)
        .into_iter()
        .map(|frame| {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (k, (x, w)) in frame.iter().zip(window).enumerate() {
                buf[k] = Complex::new(x * w, 0.0);
            }
            fft.process(&mut buf);
            buf[..N_FFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

pub fn extract_mel(wave: &AudioWave) -> Result<MelSpectrogram> {
    wave.validate()?;
    let fb = filterbank();
    let frames = power_frames(&wave.samples);
    let n_frames = frames.len();
    let mut data = Vec::with_capacity(n_frames * N_MELS);
    for spec in &frames {
        for filt in fb {
            let e: f64 = filt.iter().zip(spec).map(|(w, p)| w * p).sum();
            data.push((e + MEL_FLOOR).ln() as f32);
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(invalid("mel extraction produced non-finite values"));
    }
    MelSpectrogram::new(data, n_frames)
}
