//! Lexical tone contours of the synthetic language, as log-F0 offsets added
//! to a speaker's base pitch.

use crate::error::{invalid, Result};

pub const NUM_TONES: usize = 4;

/// Tone class 1..=4 (high level, rising, dipping, falling).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Tone(u8);

impl Tone {
    pub const ALL: [Tone; 4] = [Tone(1), Tone(2), Tone(3), Tone(4)];

    pub fn new(t: u8) -> Result<Self> {
        if (1..=4).contains(&t) {
            Ok(Tone(t))
        } else {
            Err(invalid(format!("unknown tone {t}")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based index for one-hot encodings.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    /// Continuous contour at relative position `u` in [0, 1].
    pub fn offset_at(self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self.0 {
            1 => 0.0,
            2 => -0.2 + 0.4 * u,
            3 => {
                if u <= 0.6 {
                    -0.35 * u / 0.6
                } else {
                    -0.35 + 0.25 * (u - 0.6) / 0.4
                }
            }
            _ => 0.2 - 0.5 * u,
        }
    }
}

impl TryFrom<u8> for Tone {
    type Error = crate::error::Error;
    fn try_from(t: u8) -> Result<Self> {
        Tone::new(t)
    }
}

impl From<Tone> for u8 {
    fn from(t: Tone) -> u8 {
        t.0
    }
}

/// Frame-sampled contour; sample `i` sits at `u = i / (length - 1)`.
pub fn tone_template(tone: u8, length: usize) -> Result<Vec<f64>> {
    let tone = Tone::new(tone)?;
    if length < 2 {
        return Err(invalid(format!("tone template needs >= 2 frames, got {length}")));
    }
    Ok((0..length)
        .map(|i| tone.offset_at(i as f64 / (length - 1) as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn level_tone_is_flat() {
        for len in [2, 4, 17, 40] {
            assert!(tone_template(1, len).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rising_tone_is_linear() {
        assert!(close(&tone_template(2, 5).unwrap(), &[-0.2, -0.1, 0.0, 0.1, 0.2]));
    }

    #[test]
    fn falling_tone_endpoints() {
        assert!(close(&tone_template(4, 2).unwrap(), &[0.2, -0.3]));
    }

    #[test]
    fn dipping_tone_bottoms_out_at_sixty_percent() {
        let t = tone_template(3, 11).unwrap();
        assert!((t[0] - 0.0).abs() < 1e-12);
        assert!((t[6] + 0.35).abs() < 1e-12);
        assert!((t[10] + 0.1).abs() < 1e-12);
        let min = t.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(min, t[6]);
    }

    #[test]
    fn unknown_tone_rejected() {
        assert!(tone_template(0, 5).is_err());
        assert!(tone_template(5, 5).is_err());
        assert!(tone_template(1, 1).is_err());
    }
}
