//! Griffin-Lim phase reconstruction from log-mel spectrograms, for
//! listening to outputs. Not used by training or evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::audio::{AudioWave, HOP, SAMPLE_RATE, WIN};
use super::mel::{filterbank, hann, MelSpectrogram, MEL_FLOOR, N_FFT, N_MELS};
use crate::error::{invalid, Result};

pub const DEFAULT_ITERS: usize = 32;

/// Linear magnitude per frame: each filter's energy spread evenly over its
/// band, overlapping bands averaged by their weights.
pub fn mel_to_magnitude(mel: &MelSpectrogram) -> Vec<Vec<f64>> {
    let fb = filterbank();
    let n_bins = N_FFT / 2 + 1;
    let area: Vec<f64> = fb.iter().map(|f| f.iter().sum::<f64>().max(1e-12)).collect();
    let coverage: Vec<f64> = (0..n_bins).map(|k| fb.iter().map(|f| f[k]).sum()).collect();
    (0..mel.n_frames)
        .map(|i| {
            let frame = mel.frame(i);
            let level: Vec<f64> = (0..N_MELS)
                .map(|m| ((frame[m] as f64).exp() - MEL_FLOOR).max(0.0) / area[m])
                .collect();
            (0..n_bins)
                .map(|k| {
                    if coverage[k] <= 0.0 {
                        return 0.0;
                    }
                    let p: f64 = (0..N_MELS).map(|m| fb[m][k] * level[m]).sum::<f64>() / coverage[k];
                    p.sqrt()
                })
                .collect()
        })
        .collect()
}

pub fn griffin_lim(mel: &MelSpectrogram, iters: usize, seed: u64) -> Result<AudioWave> {
    if mel.n_frames == 0 {
        return Err(invalid("empty spectrogram"));
    }
    let mag = mel_to_magnitude(mel);
    let n_bins = N_FFT / 2 + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec: Vec<Vec<Complex<f64>>> = mag
        .iter()
        .map(|m| {
            m.iter()
                .map(|&a| Complex::from_polar(a, rng.random::<f64>() * std::f64::consts::TAU))
                .collect()
        })
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(N_FFT);
    let inv = planner.plan_fft_inverse(N_FFT);
    let n = (mel.n_frames - 1) * HOP;
    let mut wave = vec![0.0; n];
    for it in 0..=iters {
        wave = overlap_add(&spec, n, &*inv);
        if it == iters {
            break;
        }
        for (f, frame) in spec.iter_mut().enumerate() {
            let mut buf = analysis_frame(&wave, f);
            fwd.process(&mut buf);
            for k in 0..n_bins {
                let c = buf[k];
                let norm = c.norm();
                frame[k] = if norm > 1e-12 { c * (mag[f][k] / norm) } else { Complex::new(mag[f][k], 0.0) };
            }
        }
    }
    let peak = wave.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let gain = if peak > 0.99 { 0.99 / peak } else { 1.0 };
    Ok(AudioWave::new(wave.iter().map(|v| (v * gain) as f32).collect(), SAMPLE_RATE))
}

fn analysis_frame(wave: &[f64], f: usize) -> Vec<Complex<f64>> {
    let window = hann();
    let start = (f * HOP) as isize - (WIN / 2) as isize;
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for (k, w) in window.iter().enumerate() {
        let i = start + k as isize;
        if i >= 0 && (i as usize) < wave.len() {
            buf[k] = Complex::new(wave[i as usize] * w, 0.0);
        }
    }
    buf
}

fn overlap_add(spec: &[Vec<Complex<f64>>], n: usize, inv: &dyn rustfft::Fft<f64>) -> Vec<f64> {
    let window = hann();
    let mut out = vec![0.0; n];
    let mut weight = vec![0.0; n];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for (f, frame) in spec.iter().enumerate() {
        buf[..frame.len()].copy_from_slice(frame);
        for k in 1..N_FFT / 2 {
            buf[N_FFT - k] = frame[k].conj();
        }
        inv.process(&mut buf);
        let start = (f * HOP) as isize - (WIN / 2) as isize;
        for (k, w) in window.iter().enumerate() {
            let i = start + k as isize;
            if i >= 0 && (i as usize) < n {
                out[i as usize] += buf[k].re / N_FFT as f64 * w;
                weight[i as usize] += w * w;
            }
        }
    }
    for (o, w) in out.iter_mut().zip(&weight) {
        if *w > 1e-8 {
            *o /= w;
        }
    }
    out
}
