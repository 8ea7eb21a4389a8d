//! Audio features, unit tokenization and the synthetic corpus.

pub mod audio;
pub mod corpus;
pub mod kmeans;
pub mod language;
pub mod mel;
pub mod pitch;
pub mod synth;
pub mod tone;
pub mod vocoder;

pub use audio::{AudioWave, HOP, SAMPLE_RATE, WIN};
pub use corpus::{generate_corpus, Corpus, CorpusConfig, Split, SyntheticUtterance};
pub use kmeans::{assign_units, fit_kmeans, Codebook, UnitSequence};
pub use language::LanguageConfig;
pub use mel::{extract_mel, MelSpectrogram, N_MELS};
pub use pitch::{apply_uv_mask, decompose_pitch, extract_pitch, LogF0Stats, PitchTrack, RawPitch};
pub use tone::{tone_template, Tone};
