//! Autocorrelation pitch tracking and continuous log-F0 decomposition.

use super::audio::{centered_frames, AudioWave, WIN};
use crate::error::{invalid, Error, Result};

pub const F0_MIN: f64 = 50.0;
pub const F0_MAX: f64 = 500.0;
/// Voicing threshold on the peak normalized autocorrelation.
pub const VOICING_THRESHOLD: f64 = 0.45;
/// Frames quieter than this RMS are unvoiced regardless of periodicity.
pub const SILENCE_RMS: f64 = 1e-3;
pub const STD_FLOOR: f64 = 1e-4;
/// Cutoff of the low-pass applied before autocorrelation.
pub const LOWPASS_HZ: f64 = 1000.0;
const LOWPASS_TAPS: usize = 101;

/// Per-frame raw pitch: Hz on voiced frames, 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPitch {
    pub f0_hz: Vec<f64>,
    pub uv: Vec<u8>,
}

/// Mean and standard deviation of log-F0 (natural log of Hz).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogF0Stats {
    pub mean: f64,
    pub std: f64,
}

impl LogF0Stats {
    pub fn from_values(vals: &[f64]) -> Result<Self> {
        if vals.is_empty() {
            return Err(invalid("no voiced frames for log-F0 statistics"));
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        })
    }
}

/// Continuous normalized log-F0 contour plus voicing labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub f0_log: Vec<f64>,
    pub uv: Vec<u8>,
    pub stats: LogF0Stats,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.f0_log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_log.is_empty()
    }

    /// Log-Hz contour (denormalized, gap-free).
    pub fn log_hz(&self) -> Vec<f64> {
        self.f0_log
            .iter()
            .map(|z| z * self.stats.std + self.stats.mean)
            .collect()
    }

    /// Inverse of the decomposition: Hz on voiced frames, 0 elsewhere.
    pub fn to_raw(&self) -> RawPitch {
        RawPitch {
            f0_hz: apply_uv_mask(&self.f0_log, &self.uv, self.stats),
            uv: self.uv.clone(),
        }
    }

    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            f0_log: self.f0_log[..n].to_vec(),
            uv: self.uv[..n].to_vec(),
            stats: self.stats,
        }
    }
}

/// Denormalizes, exponentiates and zeroes unvoiced frames.
pub fn apply_uv_mask(f0_log: &[f64], uv: &[u8], stats: LogF0Stats) -> Vec<f64> {
    f0_log
        .iter()
        .zip(uv)
        .map(|(&z, &v)| {
            if v == 0 {
                0.0
            } else {
                (z * stats.std + stats.mean).exp()
            }
        })
        .collect()
}

fn normalized_autocorr(frame: &[f64], lag: usize) -> f64 {
    let n = frame.len() - lag;
    let (a, b) = (&frame[..n], &frame[lag..]);
    let mut num = 0.0;
    let mut ea = 0.0;
    let mut eb = 0.0;
    for i in 0..n {
        num += a[i] * b[i];
        ea += a[i] * a[i];
        eb += b[i] * b[i];
    }
    let den = (ea * eb).sqrt();
    if den <= 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Returns `(f0_hz, peak_correlation)` for one analysis window.
fn frame_pitch(frame: &[f64], sample_rate: f64) -> (f64, f64) {
    let min_lag = (sample_rate / F0_MAX).floor() as usize;
    let max_lag = ((sample_rate / F0_MIN).ceil() as usize).min(WIN - 2);
    let r: Vec<f64> = (0..=max_lag + 1)
        .map(|lag| {
            if lag + 1 < min_lag {
                0.0
            } else {
                normalized_autocorr(frame, lag)
            }
        })
        .collect();
    let peak = (min_lag..=max_lag).map(|l| r[l]).fold(f64::MIN, f64::max);
    // The shortest lag that is a local maximum close to the global peak;
    // multiples of the true period correlate almost as strongly.
    let best = (min_lag + 1..=max_lag)
        .find(|&l| r[l] >= 0.9 * peak && r[l] >= r[l - 1] && r[l] >= r[l + 1])
        .unwrap_or_else(|| (min_lag..=max_lag).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap());
    // Parabolic refinement around the integer peak.
    let mut lag = best as f64;
    if best > min_lag && best < max_lag {
        let (y0, y1, y2) = (r[best - 1], r[best], r[best + 1]);
        let den = y0 - 2.0 * y1 + y2;
        if den.abs() > 1e-12 {
            lag += (0.5 * (y0 - y2) / den).clamp(-0.5, 0.5);
        }
    }
    ((sample_rate / lag).clamp(F0_MIN, F0_MAX), peak)
}

/// Hamming-windowed sinc FIR, centred so the output is not delayed.
fn lowpass(x: &[f64], sample_rate: f64) -> Vec<f64> {
    let fc = LOWPASS_HZ / sample_rate;
    let m = (LOWPASS_TAPS - 1) as f64;
    let mut taps: Vec<f64> = (0..LOWPASS_TAPS)
        .map(|i| {
            let n = i as f64 - m / 2.0;
            let sinc = if n == 0.0 {
                2.0 * fc
            } else {
                (std::f64::consts::TAU * fc * n).sin() / (std::f64::consts::PI * n)
            };
            sinc * (0.54 - 0.46 * (std::f64::consts::TAU * i as f64 / m).cos())
        })
        .collect();
    let gain: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= gain);
    let half = LOWPASS_TAPS / 2;
    (0..x.len())
        .map(|i| {
            taps.iter()
                .enumerate()
                .filter_map(|(j, t)| (i + j).checked_sub(half).and_then(|k| x.get(k)).map(|v| v * t))
                .sum()
        })
        .collect()
}

/// Per mel-frame F0 (Hz, 0 when unvoiced) and voicing labels.
pub fn extract_pitch(wave: &AudioWave) -> Result<RawPitch> {
    wave.validate()?;
    let sr = wave.sample_rate_hz as f64;
    let mut f0_hz = Vec::new();
    let mut uv = Vec::new();
    let filtered: Vec<f32> = lowpass(
        &wave.samples.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        sr,
    )
    .into_iter()
    .map(|v| v as f32)
    .collect();
    for (frame, lp) in centered_frames(&wave.samples).into_iter().zip(centered_frames(&filtered)) {
        let rms = (frame.iter().map(|x| x * x).sum::<f64>() / frame.len() as f64).sqrt();
        let (f0, peak) = if rms < SILENCE_RMS {
            (0.0, 0.0)
        } else {
            frame_pitch(&lp, sr)
        };
        if peak >= VOICING_THRESHOLD {
            f0_hz.push(f0);
            uv.push(1);
        } else {
            f0_hz.push(0.0);
            uv.push(0);
        }
    }
    Ok(RawPitch { f0_hz, uv })
}

/// Log of voiced values, linear interpolation through unvoiced spans, edges
/// held at the nearest voiced value. Unnormalized.
pub fn continuous_log_f0(raw_f0: &[f64], uv: &[u8]) -> Result<Vec<f64>> {
    if raw_f0.len() != uv.len() {
        return Err(Error::Shape(format!(
            "raw_f0 has {} frames, uv has {}",
            raw_f0.len(),
            uv.len()
        )));
    }
    if uv.iter().any(|&v| v > 1) {
        return Err(invalid("uv labels must be 0 or 1"));
    }
    let voiced: Vec<usize> = (0..uv.len()).filter(|&i| uv[i] == 1).collect();
    if voiced.is_empty() {
        return Err(invalid("utterance has no voiced frames"));
    }
    for &i in &voiced {
        if !(raw_f0[i] > 0.0 && raw_f0[i].is_finite()) {
            return Err(invalid(format!("voiced frame {i} has F0 {}", raw_f0[i])));
        }
    }
    let mut out = vec![0.0; uv.len()];
    let first = voiced[0];
    let last = *voiced.last().unwrap();
    for o in out.iter_mut().take(first + 1) {
        *o = raw_f0[first].ln();
    }
    for o in out.iter_mut().skip(last) {
        *o = raw_f0[last].ln();
    }
    for w in voiced.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (la, lb) = (raw_f0[a].ln(), raw_f0[b].ln());
        for (i, o) in out.iter_mut().enumerate().take(b + 1).skip(a) {
            let frac = (i - a) as f64 / (b - a) as f64;
            *o = la + frac * (lb - la);
        }
    }
    Ok(out)
}

/// Decomposition with utterance-level mean/variance normalization.
pub fn decompose_pitch(raw_f0: &[f64], uv: &[u8]) -> Result<PitchTrack> {
    let log = continuous_log_f0(raw_f0, uv)?;
    let stats = LogF0Stats::from_values(&log)?;
    Ok(normalize(log, uv, stats))
}

/// Decomposition normalized with externally supplied statistics.
pub fn decompose_pitch_with_stats(raw_f0: &[f64], uv: &[u8], stats: LogF0Stats) -> Result<PitchTrack> {
    let log = continuous_log_f0(raw_f0, uv)?;
    Ok(normalize(log, uv, stats))
}

fn normalize(log: Vec<f64>, uv: &[u8], stats: LogF0Stats) -> PitchTrack {
    PitchTrack {
        f0_log: log.iter().map(|l| (l - stats.mean) / stats.std).collect(),
        uv: uv.to_vec(),
        stats,
    }
}
