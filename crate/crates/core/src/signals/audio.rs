use std::path::Path;

use crate::error::{invalid, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// 10 ms hop at 16 kHz.
pub const HOP: usize = 160;
/// 40 ms analysis window at 16 kHz.
pub const WIN: usize = 640;

/// Mono waveform; amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioWave {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl AudioWave {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Pipeline precondition shared by the feature extractors.
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(invalid("empty waveform"));
        }
        if self.sample_rate_hz != SAMPLE_RATE {
            return Err(invalid(format!(
                "expected {SAMPLE_RATE} Hz audio, got {} Hz",
                self.sample_rate_hz
            )));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(invalid("waveform has non-finite samples"));
        }
        Ok(())
    }

    /// Frame count under centered framing: floor(N / hop) + 1.
    pub fn num_frames(&self) -> usize {
        self.samples.len() / HOP + 1
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut r = hound::WavReader::open(path)?;
        let spec = r.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 {
            return Err(invalid(format!(
                "{}: expected mono PCM16, got {} ch / {} bit",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        let samples = r
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / i16::MAX as f32))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self::new(samples, spec.sample_rate))
    }
}

/// Reflect index into `[0, n)` (numpy "reflect" mode, repeated for short signals).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Centered frames of `WIN` samples at hop `HOP`, reflect padded.
pub(crate) fn centered_frames(samples: &[f32]) -> Vec<Vec<f64>> {
    let n = samples.len();
    let n_frames = n / HOP + 1;
    let half = (WIN / 2) as isize;
    (0..n_frames)
        .map(|f| {
            let start = (f * HOP) as isize - half;
            (0..WIN as isize)
                .map(|k| samples[reflect_index(start + k, n)] as f64)
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_numpy_convention() {
        // np.pad([0,1,2,3], 2, mode="reflect") -> [2,1,0,1,2,3,2,1]
        let got: Vec<usize> = (-2..6).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 1, 2, 3, 2, 1]);
    }

    #[test]
    fn validation_rejects_wrong_rate_and_empty() {
        assert!(AudioWave::new(vec![], SAMPLE_RATE).validate().is_err());
        assert!(AudioWave::new(vec![0.0; 10], 22_050).validate().is_err());
        assert!(AudioWave::new(vec![f32::NAN], SAMPLE_RATE).validate().is_err());
        assert!(AudioWave::new(vec![0.0; 10], SAMPLE_RATE).validate().is_ok());
    }

    #[test]
    fn wav_round_trip_is_pcm16_accurate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = AudioWave::new((0..400).map(|i| (i as f32 * 0.05).sin() * 0.5).collect(), SAMPLE_RATE);
        w.write_wav(&p).unwrap();
        let r = AudioWave::read_wav(&p).unwrap();
        assert_eq!(r.sample_rate_hz, SAMPLE_RATE);
        for (a, b) in w.samples.iter().zip(&r.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
