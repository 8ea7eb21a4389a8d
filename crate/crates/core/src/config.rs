//! Run configuration files and named presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{DEFAULT_NFE, DEFAULT_SWAY};
use crate::mel_decoder::DecoderConfig;
use crate::model::{InferOptions, ModelConfig};
use crate::nn::dit::DitConfig;
use crate::pitch::PitchConfig;
use crate::postnet::PostnetConfig;
use crate::signals::CorpusConfig;
use crate::trainer::TrainConfig;
use crate::units::UnitConfig;
use crate::visual::VisualConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub nfe: usize,
    pub sway: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            nfe: DEFAULT_NFE,
            sway: DEFAULT_SWAY,
            seed: 0,
            batch_size: 8,
        }
    }
}

impl InferConfig {
    pub fn options(&self, coarse_only: bool) -> InferOptions {
        InferOptions {
            nfe: self.nfe,
            sway: self.sway,
            seed: self.seed,
            coarse_only,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Fast,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "fast" => Ok(Self::Fast),
            "paper" => Ok(Self::Paper),
            _ => Err(Error::Config(format!("unknown preset `{s}` (desk, fast, paper)"))),
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Fast => Self::fast(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Dims 128; learning rate and warmup scaled to a few hundred steps.
    pub fn desk() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs_per_stage: 30,
                batch_size: 8,
                peak_lr: 1e-3,
                warmup_epochs: 3,
                ..TrainConfig::default()
            },
            infer: InferConfig::default(),
        }
    }

    /// Narrow networks for tests and quick experiments.
    pub fn fast() -> Self {
        let d = 48;
        let dit = DitConfig {
            dim: d,
            heads: 2,
            layers: 2,
        };
        Self {
            corpus: CorpusConfig::default(),
            model: ModelConfig {
                visual: VisualConfig {
                    stem_channels: 16,
                    res_blocks: 2,
                    dim: d,
                    heads: 2,
                    layers: 1,
                    bypass_transformer: false,
                },
                upsample_dim: d,
                units: UnitConfig {
                    dim: d,
                    heads: 2,
                    layers: 2,
                    ..UnitConfig::default()
                },
                pitch: PitchConfig {
                    cond_dim: d,
                    dit,
                    uv_channels: d,
                },
                decoder: DecoderConfig {
                    dim: d,
                    heads: 2,
                    layers: 2,
                },
                // the velocity carries 80 noise channels, so the postnet
                // cannot be narrower than the mel
                postnet: PostnetConfig {
                    cond_dim: 128,
                    dit: DitConfig {
                        dim: 128,
                        heads: 4,
                        layers: 2,
                    },
                },
                codebook_size: 64,
            },
            train: TrainConfig {
                epochs_per_stage: 30,
                postnet_epochs: Some(60),
                batch_size: 1,
                peak_lr: 2e-3,
                warmup_epochs: 2,
                ..TrainConfig::default()
            },
            infer: InferConfig::default(),
        }
    }

    /// Full depths and schedule; far beyond a desk budget.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.model.decoder.layers = 6;
        c.model.pitch.dit.layers = 8;
        c.model.postnet.dit.layers = 12;
        c.train = TrainConfig {
            epochs_per_stage: 100,
            batch_size: 16,
            peak_lr: 1e-4,
            warmup_epochs: 10,
            ..TrainConfig::default()
        };
        c
    }

    /// Parses a file whose keys override `base`. Unknown keys are errors.
    pub fn from_toml_over(base: &Self, text: &str) -> Result<Self> {
        let cfg_err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let overrides: toml::Table = toml::from_str(text).map_err(|e| cfg_err(&e))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| cfg_err(&e))?;
        merge(&mut merged, overrides);
        let c: Self = merged.try_into().map_err(|e| cfg_err(&e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_over(&Self::desk(), text)
    }

    pub fn load(path: &Path, base: &Self) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_over(base, &text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        if self.model.codebook_size != self.corpus.codebook_size {
            return Err(Error::Config(format!(
                "model codebook {} differs from corpus codebook {}",
                self.model.codebook_size, self.corpus.codebook_size
            )));
        }
        if self.infer.nfe == 0 {
            return Err(Error::Config("nfe must be at least 1".into()));
        }
        Ok(())
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}
