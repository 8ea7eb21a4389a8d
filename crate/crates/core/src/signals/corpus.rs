//! Synthetic tonal audio-visual corpus with known ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::audio::AudioWave;
use super::kmeans::{assign_units, fit_kmeans, Codebook, UnitSequence};
use super::language::{speaker_profile, LanguageConfig};
use super::mel::{extract_mel, MelSpectrogram};
use super::pitch::{decompose_pitch, extract_pitch, PitchTrack, RawPitch};
use super::synth::{self, nucleus_spans, unit_feature_dim};
use super::tone::Tone;
use crate::error::{invalid, Error, Result};
use crate::io::Array;
use crate::visual::clip::LipClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub language: LanguageConfig,
    pub num_speakers: usize,
    pub train_per_speaker: usize,
    pub val_per_speaker: usize,
    pub test_per_speaker: usize,
    pub syllables_per_utterance: usize,
    /// Number of syllable classes in use (at most the language's inventory).
    pub inventory_size: usize,
    /// Desk scale 64; a full-size setup would use 2000.
    pub codebook_size: usize,
    pub unit_noise_std: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            language: LanguageConfig::target(),
            num_speakers: 4,
            train_per_speaker: 8,
            val_per_speaker: 2,
            test_per_speaker: 4,
            syllables_per_utterance: 4,
            inventory_size: 8,
            codebook_size: 64,
            unit_noise_std: 0.02,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.language.validate()?;
        if self.num_speakers == 0 {
            return Err(invalid("num_speakers must be positive"));
        }
        if self.syllables_per_utterance == 0 {
            return Err(invalid("syllables_per_utterance must be positive"));
        }
        if self.inventory_size == 0 || self.inventory_size > self.language.inventory_size() {
            return Err(invalid(format!(
                "inventory_size {} exceeds the {} syllables of language `{}`",
                self.inventory_size,
                self.language.inventory_size(),
                self.language.name
            )));
        }
        if self.train_per_speaker == 0 {
            return Err(invalid("train split must not be empty"));
        }
        if self.codebook_size == 0 {
            return Err(invalid("codebook_size must be positive"));
        }
        Ok(())
    }

    pub fn unit_feature_dim(&self) -> usize {
        unit_feature_dim(self.inventory_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUtterance {
    pub id: String,
    pub split: Split,
    pub speaker_id: u32,
    pub syllable_ids: Vec<u32>,
    pub tone_labels: Vec<Tone>,
    /// Mel-frame spans of the tone-bearing nuclei.
    pub tone_spans: Vec<(usize, usize)>,
    pub clip: LipClip,
    pub wave: AudioWave,
    pub mel: MelSpectrogram,
    pub raw_pitch: RawPitch,
    pub pitch: PitchTrack,
    pub unit_features: Vec<f32>,
    pub units: UnitSequence,
}

/// Everything except the unit ids, which need the corpus codebook.
pub struct RenderedUtterance {
    pub clip: LipClip,
    pub wave: AudioWave,
    pub mel: MelSpectrogram,
    pub raw_pitch: RawPitch,
    pub pitch: PitchTrack,
    pub unit_features: Vec<f32>,
    pub tone_spans: Vec<(usize, usize)>,
}

/// Deterministic rendering of one utterance from its symbolic description.
pub fn render_utterance(
    config: &CorpusConfig,
    speaker_id: u32,
    syllables: &[u32],
    tones: &[Tone],
    seed: u64,
) -> Result<RenderedUtterance> {
    if syllables.len() != tones.len() {
        return Err(invalid("tone_labels and syllable_ids differ in length"));
    }
    if syllables.is_empty() {
        return Err(invalid("utterance needs at least one syllable"));
    }
    if let Some(s) = syllables.iter().find(|&&s| s as usize >= config.inventory_size) {
        return Err(invalid(format!("syllable {s} outside inventory")));
    }
    let spk = speaker_profile(speaker_id);
    let lang = &config.language;
    let wave = synth::synthesize_audio(lang, &spk, syllables, tones);
    let clip = synth::render_clip(lang, &spk, syllables);
    let mel = extract_mel(&wave)?;
    let raw_pitch = extract_pitch(&wave)?;
    let pitch = decompose_pitch(&raw_pitch.f0_hz, &raw_pitch.uv)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit_features = synth::unit_features(config.inventory_size, syllables, tones, config.unit_noise_std, &mut rng);
    Ok(RenderedUtterance {
        clip,
        wave,
        mel,
        raw_pitch,
        pitch,
        unit_features,
        tone_spans: nucleus_spans(lang, syllables),
    })
}

/// splitmix64 of `(seed, index)`: an independent stream per utterance.
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub codebook: Codebook,
    pub utterances: Vec<SyntheticUtterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&SyntheticUtterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }
}

/// Generates a corpus; the codebook is fitted on the train split unless one
/// is supplied.
pub fn generate_corpus_with_codebook(
    config: &CorpusConfig,
    seed: u64,
    codebook: Option<Codebook>,
) -> Result<Corpus> {
    config.validate()?;
    let mut plans = Vec::new();
    let mut index = 0u64;
    for split in Split::ALL {
        let per = match split {
            Split::Train => config.train_per_speaker,
            Split::Val => config.val_per_speaker,
            Split::Test => config.test_per_speaker,
        };
        for spk in 0..config.num_speakers as u32 {
            for i in 0..per {
                plans.push((split, spk, i, index));
                index += 1;
            }
        }
    }
    let mut rendered = Vec::with_capacity(plans.len());
    for &(split, spk, i, index) in &plans {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, index));
        let syllables: Vec<u32> = (0..config.syllables_per_utterance)
            .map(|_| rng.random_range(0..config.inventory_size as u32))
            .collect();
        let tones = config.language.realize_tones(&syllables, || rng.random::<f64>());
        let r = render_utterance(config, spk, &syllables, &tones, rng.random())?;
        let id = format!("{}-s{spk:02}-{i:03}", split.name());
        rendered.push((split, spk, id, syllables, tones, r));
    }
    let dim = config.unit_feature_dim();
    let codebook = match codebook {
        Some(cb) => {
            if cb.dim != dim {
                return Err(Error::Shape(format!("codebook dim {} != feature dim {dim}", cb.dim)));
            }
            cb
        }
        None => {
            let train: Vec<f32> = rendered
                .iter()
                .filter(|r| r.0 == Split::Train)
                .flat_map(|r| r.5.unit_features.iter().copied())
                .collect();
            fit_kmeans(&train, dim, config.codebook_size, seed)?.codebook
        }
    };
    let mut utterances = Vec::with_capacity(rendered.len());
    for (split, spk, id, syllables, tones, r) in rendered {
        let units = assign_units(&r.unit_features, dim, &codebook)?;
        utterances.push(SyntheticUtterance {
            id,
            split,
            speaker_id: spk,
            syllable_ids: syllables,
            tone_labels: tones,
            tone_spans: r.tone_spans,
            clip: r.clip,
            wave: r.wave,
            mel: r.mel,
            raw_pitch: r.raw_pitch,
            pitch: r.pitch,
            unit_features: r.unit_features,
            units,
        });
    }
    Ok(Corpus {
        config: config.clone(),
        seed,
        codebook,
        utterances,
    })
}

pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    generate_corpus_with_codebook(config, seed, None)
}

// ---------------------------------------------------------------------------
// On-disk layout:
//   <root>/corpus.json                 config + seed
//   <root>/codebook.bin                [C x D]
//   <root>/<split>/<utt_id>/clip.npyish [T_v x 96 x 96]
//                          wave.wav     16 kHz mono PCM16
//                          meta.json
//                          mel.bin      [T_m x 80]
//                          pitch.bin    [T_m x 2]  (f0 Hz or 0, uv)
//                          units.bin    [T_u]
//                          features.bin [T_u x D]
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceMeta {
    pub id: String,
    pub split: Split,
    pub speaker_id: u32,
    pub syllable_ids: Vec<u32>,
    pub tone_labels: Vec<Tone>,
    pub tone_spans: Vec<(usize, usize)>,
    pub video_frames: usize,
    pub codebook_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusHeader {
    seed: u64,
    config: CorpusConfig,
}

pub fn pitch_to_array(p: &RawPitch) -> Array {
    let mut data = Vec::with_capacity(2 * p.f0_hz.len());
    for (f, v) in p.f0_hz.iter().zip(&p.uv) {
        data.push(*f as f32);
        data.push(*v as f32);
    }
    Array {
        dims: vec![p.f0_hz.len(), 2],
        data,
    }
}

pub fn pitch_from_array(a: &Array) -> Result<RawPitch> {
    if a.dims.len() != 2 || a.dims[1] != 2 {
        return Err(Error::Shape(format!("pitch array dims {:?}", a.dims)));
    }
    let f0_hz = a.data.chunks_exact(2).map(|c| c[0] as f64).collect();
    let uv = a.data.chunks_exact(2).map(|c| (c[1] > 0.5) as u8).collect();
    Ok(RawPitch { f0_hz, uv })
}

impl Corpus {
    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        let header = CorpusHeader {
            seed: self.seed,
            config: self.config.clone(),
        };
        fs::write(root.join("corpus.json"), serde_json::to_string_pretty(&header)?)?;
        self.codebook.to_array().write(&root.join("codebook.bin"))?;
        let dim = self.config.unit_feature_dim();
        for u in &self.utterances {
            let dir = root.join(u.split.name()).join(&u.id);
            fs::create_dir_all(&dir)?;
            u.clip.to_array().write(&dir.join("clip.npyish"))?;
            u.wave.write_wav(&dir.join("wave.wav"))?;
            let meta = UtteranceMeta {
                id: u.id.clone(),
                split: u.split,
                speaker_id: u.speaker_id,
                syllable_ids: u.syllable_ids.clone(),
                tone_labels: u.tone_labels.clone(),
                tone_spans: u.tone_spans.clone(),
                video_frames: u.clip.n_frames,
                codebook_size: u.units.codebook_size,
            };
            fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
            u.mel.to_array().write(&dir.join("mel.bin"))?;
            pitch_to_array(&u.raw_pitch).write(&dir.join("pitch.bin"))?;
            Array::new(vec![u.units.len()], u.units.ids.iter().map(|&i| i as f32).collect())?
                .write(&dir.join("units.bin"))?;
            Array::new(vec![u.units.len(), dim], u.unit_features.clone())?.write(&dir.join("features.bin"))?;
        }
        Ok(())
    }

    /// Loads the given splits (all when `splits` is empty). The waveform is
    /// read back from PCM16, the features from their binary dumps.
    pub fn load(root: &Path, splits: &[Split]) -> Result<Self> {
        let header: CorpusHeader = serde_json::from_str(&fs::read_to_string(root.join("corpus.json"))?)?;
        let codebook = Codebook::from_array(Array::read_ndim(&root.join("codebook.bin"), 2)?)?;
        let wanted: Vec<Split> = if splits.is_empty() { Split::ALL.to_vec() } else { splits.to_vec() };
        let mut utterances = Vec::new();
        for split in wanted {
            let dir = root.join(split.name());
            if !dir.exists() {
                continue;
            }
            let mut ids: Vec<_> = fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            ids.sort();
            for id in ids {
                utterances.push(load_utterance(&dir.join(&id))?);
            }
        }
        Ok(Self {
            config: header.config,
            seed: header.seed,
            codebook,
            utterances,
        })
    }
}

fn load_utterance(dir: &Path) -> Result<SyntheticUtterance> {
    let meta: UtteranceMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let clip = LipClip::from_array(Array::read_ndim(&dir.join("clip.npyish"), 3)?)?;
    let wave = AudioWave::read_wav(&dir.join("wave.wav"))?;
    let mel = MelSpectrogram::from_array(Array::read_ndim(&dir.join("mel.bin"), 2)?)?;
    let raw_pitch = pitch_from_array(&Array::read_ndim(&dir.join("pitch.bin"), 2)?)?;
    let pitch = decompose_pitch(&raw_pitch.f0_hz, &raw_pitch.uv)?;
    let units_arr = Array::read_ndim(&dir.join("units.bin"), 1)?;
    let units = UnitSequence::new(units_arr.data.iter().map(|&v| v as u32).collect(), meta.codebook_size)?;
    let unit_features = Array::read_ndim(&dir.join("features.bin"), 2)?.data;
    Ok(SyntheticUtterance {
        id: meta.id,
        split: meta.split,
        speaker_id: meta.speaker_id,
        syllable_ids: meta.syllable_ids,
        tone_labels: meta.tone_labels,
        tone_spans: meta.tone_spans,
        clip,
        wave,
        mel,
        raw_pitch,
        pitch,
        unit_features,
        units,
    })
}

/// Number of frames in each split, keyed by split name.
pub fn split_sizes(corpus: &Corpus) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    for u in &corpus.utterances {
        *m.entry(u.split.name()).or_insert(0) += 1;
    }
    m
}
