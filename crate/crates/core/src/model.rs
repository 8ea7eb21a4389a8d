//! The complete network: visual frontend, unit predictor, pitch predictor,
//! mel decoder and postnet, with batching, losses and the inference chain.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::{gaussian, interp_path, ode_generate, rfm_loss};
use crate::mel_decoder::{mel_l1_loss, stage1_total_loss, ConditionEm, DecoderConfig, MelDecoder, Stage1Weights};
use crate::nn::params::{ParamStore, Scope};
use crate::nn::layers::sigmoid;
use crate::pitch::{
    align_ids, bce_with_logits, ids_tensor, ode_generate_f0, speaker_tensor, ConditionEp, F0Flow, PitchConfig,
    UvPredictor,
};
use crate::postnet::{Postnet, PostnetConfig};
use crate::signals::corpus::stream_seed;
use crate::signals::{apply_uv_mask, LogF0Stats, MelSpectrogram, SyntheticUtterance, N_MELS};
use crate::units::{argmax_units, smooth_targets_tensor, unit_ce_loss, UnitConfig, UnitPredictor};
use crate::visual::{clip_tensor, TemporalUpsampler, VisualConfig, VisualEncoder};

/// Prefix of every postnet parameter; everything else belongs to stage 1.
pub const POSTNET_PREFIX: &str = "postnet.";
/// Parameters of the visual frontend (encoder and upsampler).
pub const FRONTEND_PREFIXES: [&str; 2] = ["visual.", "upsample."];

pub fn is_stage1(name: &str) -> bool {
    !name.starts_with(POSTNET_PREFIX)
}

pub fn is_frontend(name: &str) -> bool {
    FRONTEND_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub visual: VisualConfig,
    /// Width of the upsampled visual features.
    pub upsample_dim: usize,
    pub units: UnitConfig,
    pub pitch: PitchConfig,
    pub decoder: DecoderConfig,
    pub postnet: PostnetConfig,
    pub codebook_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            visual: VisualConfig::default(),
            upsample_dim: 128,
            units: UnitConfig::default(),
            pitch: PitchConfig::default(),
            decoder: DecoderConfig::default(),
            postnet: PostnetConfig::default(),
            codebook_size: 64,
        }
    }
}

/// Independent switches; any combination is allowed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// No unit supervision and no unit embeddings downstream.
    pub unit: bool,
    /// No pitch embedding in E_m and no pitch losses.
    pub pitch: bool,
    /// F0 regressed with L1 in a single pass instead of flow matching.
    pub f0_cfm: bool,
    /// Coarse output only; stage 2 is not run.
    pub postnet: bool,
}

impl Ablations {
    pub fn parse_list(items: &[String]) -> Result<Self> {
        let mut a = Self::default();
        for item in items {
            match item.as_str() {
                "unit" => a.unit = true,
                "pitch" => a.pitch = true,
                "f0_cfm" => a.f0_cfm = true,
                "postnet" => a.postnet = true,
                other => return Err(invalid(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(a)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.unit {
            v.push("unit");
        }
        if self.pitch {
            v.push("pitch");
        }
        if self.f0_cfm {
            v.push("f0_cfm");
        }
        if self.postnet {
            v.push("postnet");
        }
        v
    }

    pub fn apply(&self, w: Stage1Weights) -> Stage1Weights {
        Stage1Weights {
            lambda_unit: if self.unit { 0.0 } else { w.lambda_unit },
            lambda_uv: if self.pitch { 0.0 } else { w.lambda_uv },
            lambda_f0: if self.pitch { 0.0 } else { w.lambda_f0 },
            lambda_mel: w.lambda_mel,
        }
    }
}

/// Data-derived normalization: a global affine map for log-mel values and
/// per-speaker log-F0 statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub mel_mean: f64,
    pub mel_std: f64,
    pub speaker_f0: BTreeMap<u32, LogF0Stats>,
}

impl Normalizer {
    pub fn fit(utts: &[&SyntheticUtterance]) -> Result<Self> {
        if utts.is_empty() {
            return Err(invalid("cannot fit normalization on an empty split"));
        }
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        let mut logs: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for u in utts {
            for &v in &u.mel.data {
                n += 1;
                sum += v as f64;
                sq += (v as f64).powi(2);
            }
            let entry = logs.entry(u.speaker_id).or_default();
            for (&f, &v) in u.raw_pitch.f0_hz.iter().zip(&u.raw_pitch.uv) {
                if v == 1 {
                    entry.push(f.ln());
                }
            }
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).max(1e-12).sqrt();
        let speaker_f0 = logs
            .into_iter()
            .map(|(k, v)| Ok((k, LogF0Stats::from_values(&v)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            mel_mean: mean,
            mel_std: std,
            speaker_f0,
        })
    }

    pub fn speaker(&self, id: u32) -> Result<LogF0Stats> {
        self.speaker_f0
            .get(&id)
            .copied()
            .ok_or_else(|| invalid(format!("no pitch statistics for speaker {id}")))
    }

    /// Per-speaker normalized continuous log-F0 of an utterance.
    pub fn f0_target(&self, u: &SyntheticUtterance) -> Result<Vec<f64>> {
        let s = self.speaker(u.speaker_id)?;
        Ok(u.pitch.log_hz().iter().map(|l| (l - s.mean) / s.std).collect())
    }
}

/// Trims or pads a per-frame sequence to `t` frames, tolerating one frame.
fn fit_len<T: Clone>(v: &[T], t: usize, what: &str) -> Result<Vec<T>> {
    match v.len() {
        n if n >= t && n <= t + 1 => Ok(v[..t].to_vec()),
        n if n + 1 == t && n > 0 => {
            let mut out = v.to_vec();
            out.push(v[n - 1].clone());
            Ok(out)
        }
        n => Err(Error::Shape(format!("{what}: {n} frames cannot align to {t}"))),
    }
}

/// One utterance prepared as model inputs and targets.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub speaker_id: u32,
    /// `[1, T_v, 96, 96]`
    pub video: Tensor,
    /// Unit ids at `2·T_v`.
    pub units: Vec<u32>,
    /// Normalized log-F0 at `4·T_v`.
    pub f0: Vec<f64>,
    pub uv: Vec<f64>,
    /// Normalized mel `[1, 4·T_v, 80]`.
    pub mel: Tensor,
}

impl Example {
    pub fn new(u: &SyntheticUtterance, norm: &Normalizer, dtype: DType) -> Result<Self> {
        let tv = u.clip.n_frames;
        let (tu, tm) = (2 * tv, 4 * tv);
        let units = align_ids(&u.units.ids, tu)?;
        let f0 = fit_len(&norm.f0_target(u)?, tm, "pitch")?;
        let uv: Vec<f64> = fit_len(&u.pitch.uv, tm, "voicing")?.iter().map(|&v| v as f64).collect();
        let mel = fit_len(&u.mel.data.chunks(N_MELS).collect::<Vec<_>>(), tm, "mel")?;
        let mel: Vec<f64> = mel
            .concat()
            .iter()
            .map(|&v| (v as f64 - norm.mel_mean) / norm.mel_std)
            .collect();
        Ok(Self {
            id: u.id.clone(),
            speaker_id: u.speaker_id,
            video: clip_tensor(&[&u.clip], dtype)?,
            units,
            f0,
            uv,
            mel: Tensor::from_vec(mel, (1, tm, N_MELS), &Device::Cpu)?.to_dtype(dtype)?,
        })
    }
}

/// Stacked examples of equal length.
#[derive(Debug, Clone)]
pub struct Batch {
    pub video: Tensor,
    pub ids: Tensor,
    pub unit_seqs: Vec<Vec<u32>>,
    pub speaker_ids: Vec<u32>,
    pub speaker: Tensor,
    pub f0: Tensor,
    pub uv: Tensor,
    pub mel: Tensor,
}

impl Batch {
    pub fn new(examples: &[&Example]) -> Result<Self> {
        let Some(first) = examples.first() else {
            return Err(invalid("empty batch"));
        };
        let dtype = first.video.dtype();
        let tm = first.f0.len();
        if examples.iter().any(|e| e.f0.len() != tm) {
            return Err(Error::Shape("batched utterances must share a length".into()));
        }
        let b = examples.len();
        let vec2 = |f: &dyn Fn(&Example) -> &Vec<f64>| -> Result<Tensor> {
            let data: Vec<f64> = examples.iter().flat_map(|e| f(e).iter().copied()).collect();
            Ok(Tensor::from_vec(data, (b, tm), &Device::Cpu)?.to_dtype(dtype)?)
        };
        let unit_seqs: Vec<Vec<u32>> = examples.iter().map(|e| e.units.clone()).collect();
        let speaker_ids: Vec<u32> = examples.iter().map(|e| e.speaker_id).collect();
        Ok(Self {
            video: Tensor::cat(&examples.iter().map(|e| &e.video).collect::<Vec<_>>(), 0)?,
            ids: ids_tensor(&unit_seqs)?,
            unit_seqs,
            speaker: speaker_tensor(&speaker_ids, dtype)?,
            speaker_ids,
            f0: vec2(&|e| &e.f0)?,
            uv: vec2(&|e| &e.uv)?,
            mel: Tensor::cat(&examples.iter().map(|e| &e.mel).collect::<Vec<_>>(), 0)?,
        })
    }

    pub fn len(&self) -> usize {
        self.speaker_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speaker_ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Losses {
    pub unit: Tensor,
    pub uv: Tensor,
    pub f0: Tensor,
    pub mel: Tensor,
    pub total: Tensor,
}

impl Stage1Losses {
    pub fn values(&self) -> Result<[f64; 5]> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok([v(&self.unit)?, v(&self.uv)?, v(&self.f0)?, v(&self.mel)?, v(&self.total)?])
    }
}

/// Outputs of the full inference chain for a batch.
#[derive(Debug, Clone)]
pub struct Inference {
    pub unit_ids: Vec<Vec<u32>>,
    /// Normalized log-F0 `[B][T_m]`.
    pub f0_norm: Vec<Vec<f64>>,
    pub uv: Vec<Vec<u8>>,
    /// Hz on voiced frames, 0 elsewhere.
    pub pitch_hz: Vec<Vec<f64>>,
    pub coarse: Vec<MelSpectrogram>,
    pub fine: Option<Vec<MelSpectrogram>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferOptions {
    pub nfe: usize,
    pub sway: f64,
    pub seed: u64,
    pub coarse_only: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            nfe: crate::flow::DEFAULT_NFE,
            sway: crate::flow::DEFAULT_SWAY,
            seed: 0,
            coarse_only: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct L2sModel {
    pub cfg: ModelConfig,
    pub ablations: Ablations,
    pub store: ParamStore,
    pub visual: VisualEncoder,
    pub upsample: TemporalUpsampler,
    pub units: UnitPredictor,
    pub ep: ConditionEp,
    pub f0: F0Flow,
    pub uv: UvPredictor,
    pub em: ConditionEm,
    pub decoder: MelDecoder,
    pub postnet: Postnet,
}

impl L2sModel {
    pub fn new(cfg: ModelConfig, ablations: Ablations, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let mut s = Scope::new(&mut store, "");
        let c = cfg.codebook_size;
        let visual = VisualEncoder::new(&mut s, "visual", cfg.visual)?;
        let upsample = TemporalUpsampler::new(&mut s, "upsample", cfg.visual.dim, cfg.upsample_dim)?;
        let units = UnitPredictor::new(&mut s, "units", cfg.units, cfg.upsample_dim, c)?;
        let (ep, f0, uv) = {
            let mut p = s.sub("pitch");
            let d = cfg.pitch.cond_dim;
            (
                ConditionEp::new(&mut p, "ep", cfg.upsample_dim, c, d, !ablations.unit)?,
                F0Flow::new(&mut p, "f0", cfg.pitch.dit, d)?,
                UvPredictor::new(&mut p, "uv", d, cfg.pitch.uv_channels)?,
            )
        };
        let (em, decoder) = {
            let mut m = s.sub("decoder");
            (
                ConditionEm::new(&mut m, "em", cfg.upsample_dim, c, cfg.decoder.dim, !ablations.unit, !ablations.pitch)?,
                MelDecoder::new(&mut m, "mel", cfg.decoder)?,
            )
        };
        let postnet = Postnet::new(&mut s, "postnet", cfg.postnet, cfg.decoder.dim)?;
        Ok(Self {
            cfg,
            ablations,
            store,
            visual,
            upsample,
            units,
            ep,
            f0,
            uv,
            em,
            decoder,
            postnet,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Visual features upsampled to unit rate, `[B, 2·T_v, D']`.
    pub fn frontend(&self, video: &Tensor) -> Result<Tensor> {
        self.upsample.forward(&self.visual.forward(video)?)
    }

    /// Stage-1 objective with teacher forcing. `seed` drives the flow noise
    /// and flow times.
    pub fn stage1_losses(&self, batch: &Batch, weights: &Stage1Weights, seed: u64) -> Result<Stage1Losses> {
        let w = self.ablations.apply(*weights);
        let up = self.frontend(&batch.video)?;
        let zero = Tensor::zeros((), self.dtype(), &Device::Cpu)?;

        let unit = if w.lambda_unit > 0.0 {
            let logits = self.units.forward(&up)?;
            let seqs: Vec<crate::signals::UnitSequence> = batch
                .unit_seqs
                .iter()
                .map(|s| crate::signals::UnitSequence::new(s.clone(), self.cfg.codebook_size))
                .collect::<Result<_>>()?;
            let refs: Vec<&_> = seqs.iter().collect();
            let q = smooth_targets_tensor(&refs, self.cfg.codebook_size, self.cfg.units.label_smoothing, self.dtype())?;
            unit_ce_loss(&logits, &q)?
        } else {
            zero.clone()
        };

        let (uv, f0) = if w.lambda_uv > 0.0 || w.lambda_f0 > 0.0 {
            let ep = self.ep.forward(&up, &batch.ids, &batch.speaker)?;
            let uv = bce_with_logits(&self.uv.forward(&ep)?, &batch.uv)?;
            let f0 = self.f0_loss(&ep, &batch.f0, seed)?;
            (uv, f0)
        } else {
            (zero.clone(), zero.clone())
        };

        let em = self.em.forward(&up, &batch.ids, &batch.speaker, &batch.f0, &batch.uv)?;
        let coarse = self.decoder.forward(&em)?;
        let mel = mel_l1_loss(&coarse, &batch.mel)?;
        let total = stage1_total_loss(&unit, &uv, &f0, &mel, &w)?;
        Ok(Stage1Losses {
            unit,
            uv,
            f0,
            mel,
            total,
        })
    }

    /// Flow-matching loss on the F0 contour, or L1 regression under the
    /// `f0_cfm` ablation.
    pub fn f0_loss(&self, ep: &Tensor, x1: &Tensor, seed: u64) -> Result<Tensor> {
        let b = x1.dim(0)?;
        if self.ablations.f0_cfm {
            let pred = self.f0.field(&x1.zeros_like()?, &vec![0.0; b], ep)?;
            return Ok((pred - x1)?.abs()?.mean_all()?);
        }
        let (x0, t) = flow_draws(x1, seed)?;
        let xt = interp_path(&x0, x1, &t)?;
        let v = self.f0.field(&xt, &t, ep)?;
        rfm_loss(&v, &x0, x1)
    }

    /// Teacher-forced coarse mel and E_m, detached: the frozen inputs of
    /// stage 2.
    pub fn stage2_inputs(&self, batch: &Batch) -> Result<(Tensor, Tensor)> {
        let up = self.frontend(&batch.video)?;
        let em = self.em.forward(&up, &batch.ids, &batch.speaker, &batch.f0, &batch.uv)?;
        let coarse = self.decoder.forward(&em)?;
        Ok((coarse.detach(), em.detach()))
    }

    pub fn postnet_loss(&self, coarse: &Tensor, em: &Tensor, target: &Tensor, seed: u64) -> Result<Tensor> {
        let cond = self.postnet.cond.forward(coarse, em)?;
        let (x0, t) = flow_draws(target, seed)?;
        let xt = interp_path(&x0, target, &t)?;
        let v = self.postnet.field(&xt, &t, &cond)?;
        rfm_loss(&v, &x0, target)
    }

    /// Full chain from video: units, F0, voicing, coarse and refined mel.
    pub fn infer(&self, video: &Tensor, speaker_ids: &[u32], norm: &Normalizer, opts: &InferOptions) -> Result<Inference> {
        let b = video.dim(0)?;
        if speaker_ids.len() != b {
            return Err(Error::Shape(format!("{} speaker ids for {b} clips", speaker_ids.len())));
        }
        let speaker = speaker_tensor(speaker_ids, self.dtype())?;
        let up = self.frontend(video)?;
        let unit_ids = argmax_units(&self.units.forward(&up)?)?;
        let ids = ids_tensor(&unit_ids)?;
        let ep = self.ep.forward(&up, &ids, &speaker)?;
        let tm = ep.dim(1)?;
        let f0 = if self.ablations.f0_cfm {
            self.f0.field(&Tensor::zeros((b, tm), self.dtype(), &Device::Cpu)?, &vec![0.0; b], &ep)?
        } else {
            ode_generate_f0(&self.f0, &ep, opts.nfe, opts.sway, stream_seed(opts.seed, 1))?
        };
        let uv_prob = sigmoid(&self.uv.forward(&ep)?)?;
        let uv_mask = uv_prob.ge(0.5)?.to_dtype(self.dtype())?;
        let em = self.em.forward(&up, &ids, &speaker, &f0, &uv_mask)?;
        let coarse = self.decoder.forward(&em)?;
        let fine = if opts.coarse_only {
            None
        } else {
            let cond = self.postnet.cond.forward(&coarse, &em)?;
            Some(ode_generate(coarse.dims(), opts.nfe, opts.sway, stream_seed(opts.seed, 2), self.dtype(), |x, t| {
                self.postnet.field(x, &vec![t; b], &cond)
            })?)
        };

        let f0_norm = to_rows(&f0)?;
        let uv: Vec<Vec<u8>> = to_rows(&uv_mask)?
            .into_iter()
            .map(|r| r.into_iter().map(|v| (v > 0.5) as u8).collect())
            .collect();
        let pitch_hz = f0_norm
            .iter()
            .zip(&uv)
            .zip(speaker_ids)
            .map(|((z, m), &spk)| Ok(apply_uv_mask(z, m, norm.speaker(spk)?)))
            .collect::<Result<_>>()?;
        Ok(Inference {
            unit_ids,
            f0_norm,
            uv,
            pitch_hz,
            coarse: denormalize_mels(&coarse, norm)?,
            fine: fine.map(|f| denormalize_mels(&f, norm)).transpose()?,
        })
    }
}

/// Noise and per-example flow times for one training step.
fn flow_draws(x1: &Tensor, seed: u64) -> Result<(Tensor, Vec<f64>)> {
    let x0 = gaussian(x1.dims(), stream_seed(seed, 0), x1.dtype())?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 1));
    let t = (0..x1.dim(0)?).map(|_| rng.random::<f64>()).collect();
    Ok((x0, t))
}

fn to_rows(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(x.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// `[B, T, 80]` normalized values back to log-mel spectrograms.
pub fn denormalize_mels(x: &Tensor, norm: &Normalizer) -> Result<Vec<MelSpectrogram>> {
    let x = x.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    x.into_iter()
        .map(|m| {
            let n = m.len();
            let data = m
                .into_iter()
                .flatten()
                .map(|v| (v * norm.mel_std + norm.mel_mean) as f32)
                .collect();
            MelSpectrogram::new(data, n)
        })
        .collect()
}
