//! Definition of a synthetic tonal language and its speakers.
//!
//! Every syllable class points at an articulatory primitive drawn from one
//! table shared by all languages: the primitive fixes the mouth shape seen
//! on video, the consonant burst and the vowel formants. Tone is carried by
//! F0 alone and never reaches the video.

use serde::{Deserialize, Serialize};

use super::tone::Tone;
use crate::error::{invalid, Result};

pub const NUM_PRIMITIVES: usize = 16;

/// Articulatory primitive shared across languages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub mouth_half_width: f64,
    pub mouth_half_height: f64,
    pub teeth: f64,
    /// Unvoiced onset length in mel frames.
    pub onset_frames: usize,
    pub formants_hz: [f64; 2],
    /// One-pole coloring coefficient of the onset burst.
    pub burst_color: f64,
}

pub fn primitive(p: usize) -> Primitive {
    let p = p % NUM_PRIMITIVES;
    Primitive {
        mouth_half_width: 14.0 + 4.0 * (p % 4) as f64,
        mouth_half_height: 6.0 + 4.0 * ((p / 4) % 4) as f64,
        teeth: ((p * 7) % 5) as f64 / 4.0,
        onset_frames: 4 + 2 * (p % 3),
        formants_hz: [300.0 + 55.0 * p as f64, 2400.0 - 90.0 * ((p * 5) % 16) as f64],
        burst_color: -0.6 + 1.3 * ((p * 3) % 8) as f64 / 7.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageConfig {
    pub name: String,
    /// Primitive index of each syllable class.
    pub primitives: Vec<usize>,
    /// Lexical tone of each syllable class.
    pub lexical_tones: Vec<u8>,
    /// Tone 3 followed by tone 3 surfaces as tone 2.
    pub third_tone_sandhi: bool,
    /// Probability that a syllable takes a uniformly random tone instead.
    pub tone_noise: f64,
}

impl LanguageConfig {
    /// The language the synthesizer is trained and evaluated on.
    pub fn target() -> Self {
        Self {
            name: "target".into(),
            primitives: (0..8).collect(),
            lexical_tones: vec![1, 3, 2, 4, 3, 1, 4, 3],
            third_tone_sandhi: true,
            tone_noise: 0.0,
        }
    }

    /// A related language used to pretrain the visual encoder; it shares
    /// half of its primitives with the target.
    pub fn source() -> Self {
        Self {
            name: "source".into(),
            primitives: (4..12).collect(),
            lexical_tones: vec![2, 4, 1, 1, 3, 2, 4, 2],
            third_tone_sandhi: false,
            tone_noise: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "target" => Ok(Self::target()),
            "source" => Ok(Self::source()),
            other => Err(invalid(format!("unknown language preset `{other}`"))),
        }
    }

    pub fn inventory_size(&self) -> usize {
        self.primitives.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(invalid("language has no syllables"));
        }
        if self.primitives.len() != self.lexical_tones.len() {
            return Err(invalid("primitives and lexical_tones differ in length"));
        }
        for &t in &self.lexical_tones {
            Tone::new(t)?;
        }
        if !(0.0..=1.0).contains(&self.tone_noise) {
            return Err(invalid("tone_noise must be a probability"));
        }
        Ok(())
    }

    pub fn primitive_of(&self, syllable: u32) -> Primitive {
        primitive(self.primitives[syllable as usize])
    }

    /// Surface tones of a syllable sequence; `draw` supplies uniform [0, 1)
    /// numbers for the noise process.
    pub fn realize_tones(&self, syllables: &[u32], mut draw: impl FnMut() -> f64) -> Vec<Tone> {
        let lexical: Vec<u8> = syllables
            .iter()
            .map(|&s| self.lexical_tones[s as usize])
            .collect();
        let mut out = Vec::with_capacity(lexical.len());
        for i in 0..lexical.len() {
            let mut t = lexical[i];
            if self.third_tone_sandhi && t == 3 && lexical.get(i + 1) == Some(&3) {
                t = 2;
            }
            if self.tone_noise > 0.0 && draw() < self.tone_noise {
                t = 1 + (draw() * 4.0).floor().min(3.0) as u8;
            }
            out.push(Tone::new(t).expect("lexical tones validated"));
        }
        out
    }
}

/// Per-speaker voice and face parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerProfile {
    pub base_f0_hz: f64,
    pub formant_scale: f64,
    pub face_scale: f64,
    pub face_offset_px: f64,
    pub skin: f64,
}

pub fn speaker_profile(id: u32) -> SpeakerProfile {
    let i = (id % 4) as usize;
    let round = (id / 4) as f64;
    SpeakerProfile {
        base_f0_hz: [120.0, 210.0, 150.0, 240.0][i] * (1.0 + 0.04 * round),
        formant_scale: [1.0, 1.12, 0.94, 1.18][i],
        face_scale: [1.0, 1.08, 0.95, 1.04][i],
        face_offset_px: [0.0, 2.0, -2.0, 1.0][i],
        skin: [0.55, 0.6, 0.5, 0.58][i],
    }
}
