//! Rendering of one utterance: harmonic audio, lip video and unit features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::audio::{AudioWave, HOP, SAMPLE_RATE, WIN};
use super::language::{LanguageConfig, Primitive, SpeakerProfile};
use super::tone::{Tone, NUM_TONES};
use crate::visual::clip::{LipClip, FRAME_SIZE};

/// Video frames per syllable (320 ms at 25 fps).
pub const VIDEO_FRAMES_PER_SYLLABLE: usize = 8;
pub const SAMPLES_PER_VIDEO_FRAME: usize = SAMPLE_RATE as usize / 25;
pub const SAMPLES_PER_SYLLABLE: usize = VIDEO_FRAMES_PER_SYLLABLE * SAMPLES_PER_VIDEO_FRAME;
pub const UNIT_FRAMES_PER_SYLLABLE: usize = 2 * VIDEO_FRAMES_PER_SYLLABLE;
/// Scale of the within-syllable position coordinate in unit features.
pub const POSITION_SCALE: f32 = 1.5;

const BURST_GAIN: f64 = 0.04;
const VOICE_GAIN: f64 = 0.4;
const FADE: usize = 80;

/// Seed of the shared burst table; part of the synthetic world, not of a corpus.
const WORLD_SEED: u64 = 0x5eed_b125;

pub fn unit_feature_dim(inventory: usize) -> usize {
    inventory + NUM_TONES + 1
}

/// Mel-frame span `[start, end)` of each syllable's voiced nucleus whose
/// analysis windows lie fully inside the nucleus.
pub fn nucleus_spans(lang: &LanguageConfig, syllables: &[u32]) -> Vec<(usize, usize)> {
    syllables
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let p = lang.primitive_of(s);
            let start = k * SAMPLES_PER_SYLLABLE + p.onset_frames * HOP;
            let end = (k + 1) * SAMPLES_PER_SYLLABLE;
            let half = WIN / 2;
            ((start + half).div_ceil(HOP), (end - half) / HOP + 1)
        })
        .collect()
}

fn burst(p: usize, prim: &Primitive, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED ^ (p as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut prev = 0.0;
    let raw: Vec<f64> = (0..len)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            prev = x + prim.burst_color * prev;
            prev
        })
        .collect();
    let rms = (raw.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt().max(1e-9);
    raw.iter().map(|v| v / rms).collect()
}

/// Amplitude of harmonic `h`: a 1/h source tilt shaped by two formant
/// resonances over a flat floor.
fn envelope(h: usize, f0: f64, prim: &Primitive, spk: &SpeakerProfile) -> f64 {
    let f = h as f64 * f0;
    let mut e = 0.3;
    for (j, &fc) in prim.formants_hz.iter().enumerate() {
        let centre = fc * spk.formant_scale;
        let bw = 150.0 + 100.0 * j as f64;
        e += [1.0, 0.6][j] * (-0.5 * ((f - centre) / bw).powi(2)).exp();
    }
    e / h as f64
}

pub fn synthesize_audio(
    lang: &LanguageConfig,
    spk: &SpeakerProfile,
    syllables: &[u32],
    tones: &[Tone],
) -> AudioWave {
    let mut out = Vec::with_capacity(syllables.len() * SAMPLES_PER_SYLLABLE);
    let sr = SAMPLE_RATE as f64;
    for (&s, &tone) in syllables.iter().zip(tones) {
        let p_idx = lang.primitives[s as usize];
        let prim = lang.primitive_of(s);
        let onset = prim.onset_frames * HOP;
        for (i, b) in burst(p_idx, &prim, onset).into_iter().enumerate() {
            let ramp = (i.min(onset - 1 - i) as f64 / FADE as f64).min(1.0);
            out.push((BURST_GAIN * ramp * b) as f32);
        }
        let n = SAMPLES_PER_SYLLABLE - onset;
        let mut phase = 0.0f64;
        for i in 0..n {
            let u = i as f64 / (n - 1) as f64;
            let f0 = spk.base_f0_hz * tone.offset_at(u).exp();
            phase += std::f64::consts::TAU * f0 / sr;
            let mut num = 0.0;
            let mut den = 0.0;
            let mut h = 1;
            while h as f64 * f0 < 7500.0 {
                let a = envelope(h, f0, &prim, spk);
                num += a * (h as f64 * phase).sin();
                den += a;
                h += 1;
            }
            let ramp = (i.min(n - 1 - i) as f64 / FADE as f64).min(1.0);
            out.push((VOICE_GAIN * ramp * num / den) as f32);
        }
    }
    AudioWave::new(out, SAMPLE_RATE)
}

/// Mouth opening in [0, 1] for video frame `j` of a syllable.
pub fn mouth_opening(prim: &Primitive, j: usize) -> f64 {
    let onset_v = prim.onset_frames as f64 / 4.0;
    let c = j as f64 + 0.5;
    if c < onset_v {
        return 0.12;
    }
    let v = (c - onset_v) / (VIDEO_FRAMES_PER_SYLLABLE as f64 - onset_v);
    (std::f64::consts::FRAC_PI_2 * (1.6 * v).min(1.0)).sin() * (1.0 - 0.55 * v)
}

fn coverage(d: f64, scale: f64) -> f64 {
    ((1.0 - d) * scale + 0.5).clamp(0.0, 1.0)
}

pub fn render_clip(lang: &LanguageConfig, spk: &SpeakerProfile, syllables: &[u32]) -> LipClip {
    let n_frames = syllables.len() * VIDEO_FRAMES_PER_SYLLABLE;
    let mut frames = Vec::with_capacity(n_frames * FRAME_SIZE * FRAME_SIZE);
    for &s in syllables {
        let prim = lang.primitive_of(s);
        for j in 0..VIDEO_FRAMES_PER_SYLLABLE {
            let o = mouth_opening(&prim, j);
            let a = prim.mouth_half_width * spk.face_scale * (0.75 + 0.25 * o);
            let b = (prim.mouth_half_height * spk.face_scale * o).max(1.5);
            let (ao, bo) = (a + 3.0, b + 3.0);
            let (cx, cy) = (47.5, 58.0 + spk.face_offset_px);
            for y in 0..FRAME_SIZE {
                for x in 0..FRAME_SIZE {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let d_out = ((dx / ao).powi(2) + (dy / bo).powi(2)).sqrt();
                    let d_in = ((dx / a).powi(2) + (dy / b).powi(2)).sqrt();
                    let c_out = coverage(d_out, bo.min(ao));
                    let c_in = coverage(d_in, b.min(a)).min(c_out);
                    let skin = spk.skin + 0.08 * (y as f64 / FRAME_SIZE as f64 - 0.5);
                    let interior = if dy < -b / 3.0 { 0.08 + 0.75 * prim.teeth } else { 0.08 };
                    let v = skin * (1.0 - c_out) + 0.85 * (c_out - c_in) + interior * c_in;
                    frames.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    LipClip {
        frames,
        n_frames,
    }
}

/// Stand-in for self-supervised frame features: syllable one-hot, tone
/// one-hot and within-syllable position, plus Gaussian jitter.
pub fn unit_features(
    inventory: usize,
    syllables: &[u32],
    tones: &[Tone],
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let dim = unit_feature_dim(inventory);
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    let mut out = Vec::with_capacity(syllables.len() * UNIT_FRAMES_PER_SYLLABLE * dim);
    for (&s, &t) in syllables.iter().zip(tones) {
        for q in 0..UNIT_FRAMES_PER_SYLLABLE {
            let mut row = vec![0.0f32; dim];
            row[s as usize] = 1.0;
            row[inventory + t.index()] = 1.0;
            row[dim - 1] = POSITION_SCALE * (q as f32 + 0.5) / UNIT_FRAMES_PER_SYLLABLE as f32;
            for v in &mut row {
                *v += noise.sample(rng) as f32;
            }
            out.extend(row);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::language::speaker_profile;
    use crate::signals::pitch::extract_pitch;

    #[test]
    fn spans_sit_inside_each_syllable() {
        let lang = LanguageConfig::target();
        let spans = nucleus_spans(&lang, &[0, 1, 2]);
        let per = SAMPLES_PER_SYLLABLE / HOP;
        for (k, &(a, b)) in spans.iter().enumerate() {
            assert!(a > k * per && b <= (k + 1) * per && b - a >= 10, "{spans:?}");
        }
    }

    #[test]
    fn tracked_pitch_follows_the_tone_curve() {
        let lang = LanguageConfig::target();
        let spk = speaker_profile(0);
        let tones = [Tone::new(2).unwrap(), Tone::new(4).unwrap()];
        let wave = synthesize_audio(&lang, &spk, &[0, 3], &tones);
        let p = extract_pitch(&wave).unwrap();
        for (k, &(a, b)) in nucleus_spans(&lang, &[0, 3]).iter().enumerate() {
            let onset = lang.primitive_of([0, 3][k]).onset_frames * HOP;
            let n = SAMPLES_PER_SYLLABLE - onset;
            for f in a..b {
                assert_eq!(p.uv[f], 1, "frame {f}");
                let i = f * HOP - k * SAMPLES_PER_SYLLABLE - onset;
                let truth = spk.base_f0_hz * tones[k].offset_at(i as f64 / (n - 1) as f64).exp();
                assert!((p.f0_hz[f] - truth).abs() < 0.03 * truth, "frame {f}: {} vs {truth}", p.f0_hz[f]);
            }
        }
    }

    #[test]
    fn onset_bursts_are_unvoiced() {
        let lang = LanguageConfig::target();
        let wave = synthesize_audio(&lang, &speaker_profile(1), &[2, 2], &[Tone::new(1).unwrap(); 2]);
        let p = extract_pitch(&wave).unwrap();
        let onset = lang.primitive_of(2).onset_frames;
        // first frames of the utterance are inside the burst
        assert!(p.uv[..onset / 2].iter().all(|&v| v == 0), "{:?}", &p.uv[..onset]);
    }

    #[test]
    fn tracker_has_no_gross_errors_on_any_nucleus() {
        let lang = LanguageConfig::target();
        for spk_id in 0..4u32 {
            let spk = speaker_profile(spk_id);
            for s in 0..lang.primitives.len() as u32 {
                for t in 1..=4u8 {
                    let tones = [Tone::new(t).unwrap(); 2];
                    let p = extract_pitch(&synthesize_audio(&lang, &spk, &[s, s], &tones)).unwrap();
                    let onset = lang.primitive_of(s).onset_frames * HOP;
                    let n = SAMPLES_PER_SYLLABLE - onset;
                    for (k, &(a, b)) in nucleus_spans(&lang, &[s, s]).iter().enumerate() {
                        for f in a..b {
                            let i = f * HOP - k * SAMPLES_PER_SYLLABLE - onset;
                            let truth = spk.base_f0_hz * tones[k].offset_at(i as f64 / (n - 1) as f64).exp();
                            assert_eq!(p.uv[f], 1, "speaker {spk_id} syllable {s} tone {t} frame {f}");
                            assert!(
                                (p.f0_hz[f] - truth).abs() < 0.05 * truth,
                                "speaker {spk_id} syllable {s} tone {t} frame {f}: {} vs {truth}",
                                p.f0_hz[f]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn clip_values_in_range() {
        let lang = LanguageConfig::target();
        let clip = render_clip(&lang, &speaker_profile(0), &[0, 5, 7]);
        clip.validate().unwrap();
        assert_eq!(clip.n_frames, 24);
    }
}
