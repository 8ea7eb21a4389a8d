//! Two-stage optimization, checkpoints, run manifests and gradient checks.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::mel_decoder::Stage1Weights;
use crate::model::{is_frontend, is_stage1, Ablations, Batch, Example, L2sModel, ModelConfig, Normalizer, POSTNET_PREFIX};
use crate::nn::optim::{AdamW, AdamWConfig};
use crate::nn::params::ParamStore;
use crate::signals::corpus::stream_seed;
use crate::signals::SyntheticUtterance;

pub const PARAMS_FILE: &str = "params.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_VERSION: u32 = 1;

/// Where the visual frontend's initial weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum EncoderInit {
    #[default]
    Random,
    Checkpoint(PathBuf),
}

impl EncoderInit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            _ => match s.strip_prefix("checkpoint:") {
                Some(p) if !p.is_empty() => Ok(Self::Checkpoint(PathBuf::from(p))),
                _ => Err(invalid(format!("encoder init must be `random` or `checkpoint:<path>`, got `{s}`"))),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Random => "random".into(),
            Self::Checkpoint(p) => format!("checkpoint:{}", p.display()),
        }
    }
}

impl Serialize for EncoderInit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for EncoderInit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_stage: usize,
    /// Stage-2 length; `None` reuses `epochs_per_stage`.
    #[serde(default)]
    pub postnet_epochs: Option<usize>,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub weights: Stage1Weights,
    pub ablations: Ablations,
    pub encoder_init: EncoderInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_stage: 30,
            postnet_epochs: None,
            batch_size: 8,
            peak_lr: 1e-4,
            warmup_epochs: 10,
            optimizer: AdamWConfig::default(),
            clip_norm: Some(1.0),
            seed: 0,
            weights: Stage1Weights::default(),
            ablations: Ablations::default(),
            encoder_init: EncoderInit::Random,
        }
    }
}

impl TrainConfig {
    /// The schedule stage 2 runs on: `postnet_epochs` in place of
    /// `epochs_per_stage`.
    pub fn stage2(&self) -> Self {
        Self {
            epochs_per_stage: self.postnet_epochs.unwrap_or(self.epochs_per_stage),
            postnet_epochs: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.postnet_epochs.is_some() {
            self.stage2().validate()?;
        }
        if self.epochs_per_stage == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs_per_stage {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than the stage ({} epochs)",
                self.warmup_epochs, self.epochs_per_stage
            )));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        self.weights.validate()
    }
}

/// Linear warmup to the peak, then cosine decay reaching zero at the final
/// epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    let w = cfg.warmup_epochs;
    if epoch < w {
        return peak * (epoch + 1) as f64 / w as f64;
    }
    let span = (cfg.epochs_per_stage - 1).saturating_sub(w).max(1) as f64;
    let p = ((epoch - w) as f64 / span).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    /// Mean per-component losses; keys depend on the stage.
    pub losses: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stage: u8,
    pub epoch: usize,
    pub seed: u64,
    /// `random`, or `checkpoint:<path>` plus the loaded frontend checksum.
    pub encoder_provenance: String,
    pub normalizer: Normalizer,
    pub stage1_checksum: String,
    pub params_sha256: String,
    pub corpus_hash: String,
    pub history: Vec<EpochRecord>,
}

pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model)?);
    h.update(serde_json::to_vec(train)?);
    Ok(hex::encode(h.finalize()))
}

/// Content hash of the utterances a run was trained on.
pub fn corpus_hash(utts: &[&SyntheticUtterance]) -> String {
    let mut h = Sha256::new();
    for u in utts {
        h.update(u.id.as_bytes());
        for v in &u.clip.frames {
            h.update(v.to_le_bytes());
        }
        for v in &u.mel.data {
            h.update(v.to_le_bytes());
        }
        for v in &u.units.ids {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// A trained model with its normalization and provenance.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: L2sModel,
    pub manifest: RunManifest,
}

impl Checkpoint {
    pub fn normalizer(&self) -> &Normalizer {
        &self.manifest.normalizer
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let params = dir.join(PARAMS_FILE);
        self.model.store.save(&params)?;
        let mut manifest = self.manifest.clone();
        manifest.params_sha256 = hex::encode(Sha256::digest(fs::read(&params)?));
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::Format {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
        let mut model = L2sModel::new(manifest.model.clone(), manifest.train.ablations, manifest.seed, DType::F32)?;
        model.store.load_from(&dir.join(PARAMS_FILE), |_| true)?;
        Ok(Self { model, manifest })
    }
}

/// Replaces the visual frontend with a checkpoint's weights; nothing else
/// is touched. Returns the checksum of the loaded parameters.
pub fn init_from_checkpoint(store: &mut ParamStore, dir: &Path) -> Result<String> {
    let loaded = store.load_from(&dir.join(PARAMS_FILE), is_frontend)?;
    if loaded.is_empty() {
        return Err(invalid("model has no visual frontend parameters"));
    }
    store.checksum(is_frontend)
}

fn append_metrics(path: Option<&Path>, rec: &EpochRecord) -> Result<()> {
    if let Some(p) = path {
        let mut f = OpenOptions::new().create(true).append(true).open(p)?;
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
    }
    Ok(())
}

fn epoch_order(n: usize, seed: u64, stage: u8, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, ((stage as u64) << 32) | epoch as u64));
    order.shuffle(&mut rng);
    order
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Stage 1: everything up to the mel decoder under the weighted objective.
pub fn train_stage1(
    train: &[&SyntheticUtterance],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    metrics: Option<&Path>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let normalizer = Normalizer::fit(train)?;
    let mut model = L2sModel::new(model_cfg.clone(), cfg.ablations, cfg.seed, DType::F32)?;
    let encoder_provenance = match &cfg.encoder_init {
        EncoderInit::Random => "random".to_string(),
        EncoderInit::Checkpoint(dir) => {
            let sum = init_from_checkpoint(&mut model.store, dir)?;
            format!("checkpoint:{}#{}", dir.display(), &sum[..16])
        }
    };
    let examples: Vec<Example> = train
        .iter()
        .map(|u| Example::new(u, &normalizer, DType::F32))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(&model.store, is_stage1, cfg.optimizer)?;
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs_per_stage {
        let lr = lr_schedule(epoch, cfg);
        let order = epoch_order(examples.len(), cfg.seed, 1, epoch);
        let mut sums = [0.0f64; 5];
        let mut norm_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let batch = Batch::new(&refs)?;
            let seed = stream_seed(cfg.seed ^ 0x51a6e1, step);
            let losses = model.stage1_losses(&batch, &cfg.weights, seed).map_err(|e| match e {
                Error::InvalidInput(msg) if msg.contains("non-finite") => Error::NonFinite {
                    component: component_of(&msg),
                    epoch,
                    step: step as usize,
                },
                e => e,
            })?;
            let vals = losses.values()?;
            for (name, v) in ["unit", "uv", "f0", "mel", "total"].iter().zip(vals) {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        component: name,
                        epoch,
                        step: step as usize,
                    });
                }
            }
            let grads = losses.total.backward()?;
            let stats = opt.step(&grads, lr, cfg.clip_norm)?;
            if !stats.grad_norm.is_finite() {
                return Err(Error::NonFinite {
                    component: "gradient",
                    epoch,
                    step: step as usize,
                });
            }
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            norm_sum += stats.grad_norm;
            batches += 1;
            step += 1;
        }
        let losses = ["unit", "uv", "f0", "mel", "total"]
            .iter()
            .zip(sums)
            .map(|(k, s)| (k.to_string(), s / batches as f64))
            .collect();
        let rec = EpochRecord {
            stage: 1,
            epoch,
            lr,
            grad_norm: norm_sum / batches as f64,
            losses,
        };
        append_metrics(metrics, &rec)?;
        history.push(rec);
    }
    let stage1_checksum = model.store.checksum(is_stage1)?;
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        config_hash: config_hash(model_cfg, cfg)?,
        model: model_cfg.clone(),
        train: cfg.clone(),
        stage: 1,
        epoch: cfg.epochs_per_stage,
        seed: cfg.seed,
        encoder_provenance,
        normalizer,
        stage1_checksum,
        params_sha256: String::new(),
        corpus_hash: corpus_hash(train),
        history,
    };
    Ok(Checkpoint { model, manifest })
}

fn component_of(msg: &str) -> &'static str {
    ["unit", "uv", "f0", "mel"]
        .into_iter()
        .find(|c| msg.starts_with(c) || msg.contains(&format!("{c} ")))
        .unwrap_or("loss")
}

/// Stage 2: the postnet alone, on frozen stage-1 outputs. Fails if any
/// stage-1 parameter changes.
pub fn train_stage2(
    train: &[&SyntheticUtterance],
    stage1: Checkpoint,
    cfg: &TrainConfig,
    metrics: Option<&Path>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let Checkpoint { model, mut manifest } = stage1;
    if model.ablations.postnet {
        return Err(invalid("the postnet is ablated; stage 2 has nothing to train"));
    }
    let before = model.store.checksum(is_stage1)?;
    if before != manifest.stage1_checksum {
        return Err(Error::FreezeViolation(
            "stage-1 parameters differ from the checkpoint's recorded checksum".into(),
        ));
    }
    let norm = manifest.normalizer.clone();
    let mut opt = AdamW::new(&model.store, |n| n.starts_with(POSTNET_PREFIX), cfg.optimizer)?;
    if let Some(bad) = opt.registry().into_iter().find(|n| is_stage1(n)) {
        return Err(Error::FreezeViolation(format!("optimizer registered stage-1 parameter {bad}")));
    }
    // frozen inputs are computed once
    let cached: Vec<(Tensor, Tensor, Tensor)> = train
        .iter()
        .map(|u| {
            let ex = Example::new(u, &norm, DType::F32)?;
            let batch = Batch::new(&[&ex])?;
            let (coarse, em) = model.stage2_inputs(&batch)?;
            Ok((coarse, em, batch.mel))
        })
        .collect::<Result<_>>()?;
    let base_epoch = manifest.history.iter().filter(|r| r.stage == 1).count();
    let sched = cfg.stage2();
    let mut step = 0u64;
    for epoch in 0..sched.epochs_per_stage {
        let lr = lr_schedule(epoch, &sched);
        let order = epoch_order(cached.len(), cfg.seed, 2, epoch);
        let (mut sum, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let cat = |k: usize| -> Result<Tensor> {
                let parts: Vec<&Tensor> = chunk
                    .iter()
                    .map(|&i| match k {
                        0 => &cached[i].0,
                        1 => &cached[i].1,
                        _ => &cached[i].2,
                    })
                    .collect();
                Ok(Tensor::cat(&parts, 0)?)
            };
            let seed = stream_seed(cfg.seed ^ 0x9057, step);
            let loss = model.postnet_loss(&cat(0)?, &cat(1)?, &cat(2)?, seed)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    component: "postnet",
                    epoch,
                    step: step as usize,
                });
            }
            let stats = opt.step(&loss.backward()?, lr, cfg.clip_norm)?;
            sum += v;
            norm_sum += stats.grad_norm;
            batches += 1;
            step += 1;
        }
        let rec = EpochRecord {
            stage: 2,
            epoch,
            lr,
            grad_norm: norm_sum / batches as f64,
            losses: [("postnet".to_string(), sum / batches as f64)].into_iter().collect(),
        };
        append_metrics(metrics, &rec)?;
        manifest.history.push(rec);
    }
    let after = model.store.checksum(is_stage1)?;
    if after != before {
        return Err(Error::FreezeViolation("stage-1 parameters changed during stage 2".into()));
    }
    manifest.stage = 2;
    manifest.epoch = base_epoch + sched.epochs_per_stage;
    manifest.config_hash = config_hash(&manifest.model, cfg)?;
    manifest.train = TrainConfig {
        ablations: manifest.train.ablations,
        encoder_init: manifest.train.encoder_init.clone(),
        ..cfg.clone()
    };
    Ok(Checkpoint { model, manifest })
}

/// Names of the parameters the stage-2 optimizer would update.
pub fn stage2_registry(store: &ParamStore) -> Result<Vec<String>> {
    let opt = AdamW::new(store, |n| n.starts_with(POSTNET_PREFIX), AdamWConfig::default())?;
    Ok(opt.registry().into_iter().map(String::from).collect())
}

/// Picks `n` random scalar entries among parameters whose name starts with
/// `prefix`.
pub fn sample_slice(store: &ParamStore, prefix: &str, n: usize, seed: u64) -> Vec<(String, usize)> {
    let candidates: Vec<(&String, usize)> = store
        .vars()
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| (k, v.elem_count()))
        .collect();
    if candidates.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (name, size) = candidates[rng.random_range(0..candidates.len())];
            (name.clone(), rng.random_range(0..size))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Below this magnitude both derivatives are treated as zero.
pub const GRAD_ZERO: f64 = 1e-9;

/// Compares backprop gradients with central differences of step `eps` on
/// the given scalar entries. `loss` must rebuild the forward pass from the
/// store's current values.
pub fn grad_check<F>(store: &ParamStore, slice: &[(String, usize)], eps: f64, loss: F) -> Result<Vec<GradCheckEntry>>
where
    F: Fn() -> Result<Tensor>,
{
    let grads = loss()?.backward()?;
    let mut out = Vec::with_capacity(slice.len());
    for (name, index) in slice {
        let var = store.var(name).ok_or_else(|| invalid(format!("unknown parameter {name}")))?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.get(*index)?.to_scalar::<f64>()?,
            None => 0.0,
        };
        let orig = store.element(name, *index)?;
        store.set_element(name, *index, orig + eps)?;
        let up = scalar(&loss()?)?;
        store.set_element(name, *index, orig - eps)?;
        let down = scalar(&loss()?)?;
        store.set_element(name, *index, orig)?;
        let numeric = (up - down) / (2.0 * eps);
        let scale = analytic.abs().max(numeric.abs());
        let rel_error = if scale < GRAD_ZERO { 0.0 } else { (analytic - numeric).abs() / scale };
        out.push(GradCheckEntry {
            name: name.clone(),
            index: *index,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(out)
}

pub fn max_rel_error(entries: &[GradCheckEntry]) -> f64 {
    entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join(METRICS_FILE)
}
