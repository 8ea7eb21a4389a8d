//! Command-line verbs: `gen-data`, `train`, `synthesize`, `evaluate` and
//! `inspect-checkpoint`.
//!
//! Every verb that writes artifacts also writes `run.json` into its output
//! directory: the argument vector, the effective configuration, the seed
//! and content hashes of its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Preset, RunConfig};
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate, plot_f0, predict, EvalReport, Prediction};
use crate::io::Array;
use crate::model::{Ablations, InferOptions};
use crate::signals::corpus::{pitch_from_array, pitch_to_array, split_sizes};
use crate::signals::vocoder::{griffin_lim, DEFAULT_ITERS};
use crate::signals::{generate_corpus, Corpus, MelSpectrogram, RawPitch, Split, SyntheticUtterance, UnitSequence};
use crate::trainer::{
    corpus_hash, metrics_path, train_stage1, train_stage2, Checkpoint, EncoderInit, MANIFEST_FILE, PARAMS_FILE,
};
use crate::visual::clip::LipClip;
use crate::visual::clip_tensor;

pub const RUN_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.jsonl";

#[derive(Debug, Parser)]
#[command(name = "tonal-l2s", version, about = "Tone-aware lip-to-speech on a synthetic tonal corpus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData(GenDataArgs),
    /// Train stage 1 (frontend, units, pitch, decoder) or stage 2 (postnet).
    Train(TrainArgs),
    /// Run the inference chain and write mel and pitch outputs.
    Synthesize(SynthesizeArgs),
    /// Score predictions against a corpus split.
    Evaluate(EvaluateArgs),
    /// Print a checkpoint's manifest summary as JSON.
    InspectCheckpoint(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML file whose keys override the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base configuration: desk, fast or paper.
    #[arg(long, default_value = "desk")]
    pub preset: String,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let base = RunConfig::preset(Preset::parse(&self.preset)?);
        match &self.config {
            Some(p) => RunConfig::load(p, &base),
            None => Ok(base),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub speakers: Option<usize>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Corpus root written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Stage-1 checkpoint to refine (stage 2 only).
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    /// unit, pitch, f0_cfm or postnet; repeatable.
    #[arg(long)]
    pub ablate: Vec<String>,
    /// `random` or `checkpoint:<dir>`.
    #[arg(long)]
    pub encoder_init: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Disable gradient-norm clipping.
    #[arg(long)]
    pub no_clip: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub nfe: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip the postnet and emit the decoder output.
    #[arg(long)]
    pub coarse_only: bool,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus root; every utterance of `--split` is synthesized.
    #[arg(long, conflicts_with = "clip")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// A single clip array `[T_v, H, W]`.
    #[arg(long, requires = "speaker")]
    pub clip: Option<PathBuf>,
    #[arg(long)]
    pub speaker: Option<u32>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub infer: InferArgs,
    /// Also write a Griffin-Lim waveform.
    #[arg(long)]
    pub wav: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Infer on the fly with this checkpoint.
    #[arg(long, conflicts_with_all = ["predictions", "ground_truth"])]
    pub checkpoint: Option<PathBuf>,
    /// Outputs of `synthesize`.
    #[arg(long, conflicts_with = "ground_truth")]
    pub predictions: Option<PathBuf>,
    /// Score the reference features against themselves.
    #[arg(long)]
    pub ground_truth: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub infer: InferArgs,
    /// Write F0 overlay plots.
    #[arg(long)]
    pub plots: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
}

/// Everything needed to re-run a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Content hashes of the inputs, keyed by role.
    pub inputs: BTreeMap<String, String>,
}

/// Parses and executes; used by the binary and by tests.
pub fn run(argv: &[String]) -> Result<()> {
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::Config(e.to_string()))?;
    execute(cli, argv)
}

pub fn execute(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a, argv),
        Command::Train(a) => cmd_train(&a, argv),
        Command::Synthesize(a) => cmd_synthesize(&a, argv),
        Command::Evaluate(a) => cmd_evaluate(&a, argv),
        Command::InspectCheckpoint(a) => {
            println!("{}", serde_json::to_string_pretty(&inspect_checkpoint(&a.checkpoint)?)?);
            Ok(())
        }
    }
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(invalid(format!("{} is not empty; pass --force to overwrite", dir.display())));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_record(dir: &Path, command: &str, argv: &[String], seed: u64, config: &RunConfig, inputs: BTreeMap<String, String>) -> Result<()> {
    let rec = RunRecord {
        command: command.into(),
        argv: argv.to_vec(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config: config.clone(),
        inputs,
    };
    fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&rec)?)?;
    Ok(())
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn load_split(data: &Path, split: &str) -> Result<Corpus> {
    let split = Split::parse(split)?;
    let corpus = Corpus::load(data, &[split])?;
    if corpus.utterances.is_empty() {
        return Err(invalid(format!("split `{}` of {} is empty", split.name(), data.display())));
    }
    Ok(corpus)
}

pub fn cmd_gen_data(a: &GenDataArgs, argv: &[String]) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(n) = a.speakers {
        cfg.corpus.num_speakers = n;
    }
    cfg.validate()?;
    prepare_out(&a.out, a.force)?;
    let corpus = generate_corpus(&cfg.corpus, a.seed)?;
    corpus.save(&a.out)?;
    write_record(&a.out, "gen-data", argv, a.seed, &cfg, BTreeMap::new())?;
    eprintln!("wrote {:?} to {}", split_sizes(&corpus), a.out.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs_per_stage = e;
        cfg.train.postnet_epochs = None;
    }
    if a.no_clip {
        cfg.train.clip_norm = None;
    }
    let mut inputs = BTreeMap::new();
    let stage1 = match (a.stage, &a.init_from) {
        (2, None) => return Err(invalid("stage 2 needs --init-from <stage-1 checkpoint>")),
        (1, Some(_)) => {
            return Err(invalid(
                "--init-from is for stage 2; initialize the encoder with --encoder-init checkpoint:<dir>",
            ))
        }
        (2, Some(dir)) => {
            if !a.ablate.is_empty() || a.encoder_init.is_some() {
                return Err(invalid("stage 2 inherits ablations and encoder init from its stage-1 checkpoint"));
            }
            let ck = Checkpoint::load(dir)?;
            if ck.manifest.stage != 1 {
                return Err(invalid(format!("{} is a stage-{} checkpoint", dir.display(), ck.manifest.stage)));
            }
            inputs.insert("init_from".into(), file_sha256(&dir.join(PARAMS_FILE))?);
            cfg.model = ck.manifest.model.clone();
            Some(ck)
        }
        _ => None,
    };
    if stage1.is_none() {
        if !a.ablate.is_empty() {
            cfg.train.ablations = Ablations::parse_list(&a.ablate)?;
        }
        if let Some(e) = &a.encoder_init {
            cfg.train.encoder_init = EncoderInit::parse(e)?;
        }
        if let EncoderInit::Checkpoint(dir) = &cfg.train.encoder_init {
            inputs.insert("encoder_init".into(), file_sha256(&dir.join(PARAMS_FILE))?);
        }
    }

    let corpus = load_split(&a.data, "train")?;
    cfg.corpus = corpus.config.clone();
    cfg.validate()?;
    let train: Vec<&SyntheticUtterance> = corpus.utterances.iter().collect();
    inputs.insert("corpus".into(), corpus_hash(&train));

    let staged = a.out.join(".staging");
    if a.out.join(MANIFEST_FILE).exists() && !a.force {
        return Err(invalid(format!("{} already holds a checkpoint; pass --force", a.out.display())));
    }
    fs::create_dir_all(&a.out)?;
    let metrics = metrics_path(&a.out);
    if metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    let ck = match stage1 {
        Some(ck) => train_stage2(&train, ck, &cfg.train, Some(&metrics))?,
        None => train_stage1(&train, &cfg.model, &cfg.train, Some(&metrics))?,
    };
    // saving through a staging directory keeps --init-from == --out safe
    ck.save(&staged)?;
    for f in [PARAMS_FILE, MANIFEST_FILE] {
        fs::rename(staged.join(f), a.out.join(f))?;
    }
    fs::remove_dir_all(&staged)?;
    write_record(&a.out, "train", argv, cfg.train.seed, &cfg, inputs)?;
    let last = ck.manifest.history.last();
    eprintln!(
        "stage {} finished after {} epochs; final losses {:?}",
        ck.manifest.stage,
        if a.stage == 2 { cfg.train.stage2().epochs_per_stage } else { cfg.train.epochs_per_stage },
        last.map(|r| &r.losses)
    );
    Ok(())
}

fn infer_options(cfg: &mut RunConfig, a: &InferArgs) -> Result<InferOptions> {
    if let Some(n) = a.nfe {
        cfg.infer.nfe = n;
    }
    if let Some(s) = a.seed {
        cfg.infer.seed = s;
    }
    cfg.validate()?;
    Ok(cfg.infer.options(a.coarse_only))
}

fn load_for_inference(dir: &Path, coarse_only: bool) -> Result<Checkpoint> {
    let ck = Checkpoint::load(dir)?;
    if !coarse_only && (ck.manifest.stage < 2 || ck.model.ablations.postnet) {
        return Err(invalid(format!(
            "{} has no trained postnet; train stage 2 or pass --coarse-only",
            dir.display()
        )));
    }
    Ok(ck)
}

fn write_prediction(dir: &Path, p: &Prediction, wav: bool, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    p.coarse.to_array().write(&dir.join("mel_coarse.bin"))?;
    if let Some(f) = &p.fine {
        f.to_array().write(&dir.join("mel_fine.bin"))?;
    }
    let raw = RawPitch {
        f0_hz: p.pitch_hz.clone(),
        uv: p.uv.clone(),
    };
    pitch_to_array(&raw).write(&dir.join("pitch.bin"))?;
    Array::new(vec![p.log_f0.len()], p.log_f0.iter().map(|&v| v as f32).collect())?.write(&dir.join("log_f0.bin"))?;
    Array::new(vec![p.unit_ids.len()], p.unit_ids.iter().map(|&v| v as f32).collect())?
        .write(&dir.join("units.bin"))?;
    if wav {
        griffin_lim(p.output_mel(), DEFAULT_ITERS, seed)?.write_wav(&dir.join("wave.wav"))?;
    }
    Ok(())
}

/// Reads what `synthesize` wrote for one utterance.
pub fn read_prediction(dir: &Path, id: &str, codebook_size: usize) -> Result<Prediction> {
    let coarse = MelSpectrogram::from_array(Array::read_ndim(&dir.join("mel_coarse.bin"), 2)?)?;
    let fine_path = dir.join("mel_fine.bin");
    let fine = if fine_path.exists() {
        Some(MelSpectrogram::from_array(Array::read_ndim(&fine_path, 2)?)?)
    } else {
        None
    };
    let raw = pitch_from_array(&Array::read_ndim(&dir.join("pitch.bin"), 2)?)?;
    let log_f0 = Array::read_ndim(&dir.join("log_f0.bin"), 1)?.data.iter().map(|&v| v as f64).collect();
    let ids: Vec<u32> = Array::read_ndim(&dir.join("units.bin"), 1)?.data.iter().map(|&v| v as u32).collect();
    Ok(Prediction {
        id: id.into(),
        unit_ids: UnitSequence::new(ids, codebook_size)?.ids,
        log_f0,
        pitch_hz: raw.f0_hz,
        uv: raw.uv,
        coarse,
        fine,
    })
}

pub fn cmd_synthesize(a: &SynthesizeArgs, argv: &[String]) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    let opts = infer_options(&mut cfg, &a.infer)?;
    let ck = load_for_inference(&a.checkpoint, a.infer.coarse_only)?;
    cfg.model = ck.manifest.model.clone();
    cfg.train = ck.manifest.train.clone();
    let mut inputs = BTreeMap::new();
    inputs.insert("checkpoint".into(), file_sha256(&a.checkpoint.join(PARAMS_FILE))?);
    let preds = match (&a.data, &a.clip) {
        (Some(data), None) => {
            let corpus = load_split(data, &a.split)?;
            let utts: Vec<&SyntheticUtterance> = corpus.utterances.iter().collect();
            inputs.insert("corpus".into(), corpus_hash(&utts));
            predict(&ck.model, ck.normalizer(), &utts, &opts, cfg.infer.batch_size)?
        }
        (None, Some(clip_path)) => {
            inputs.insert("clip".into(), file_sha256(clip_path)?);
            let clip = LipClip::from_array(Array::read_ndim(clip_path, 3)?)?;
            let speaker = a.speaker.ok_or_else(|| invalid("--clip needs --speaker"))?;
            let id = clip_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "clip".into());
            vec![predict_clip(&ck, &clip, speaker, &id, &opts)?]
        }
        _ => return Err(invalid("give exactly one of --data or --clip")),
    };
    prepare_out(&a.out, a.force)?;
    for p in &preds {
        write_prediction(&a.out.join(&p.id), p, a.wav, opts.seed)?;
    }
    write_record(&a.out, "synthesize", argv, opts.seed, &cfg, inputs)?;
    eprintln!("synthesized {} utterances into {}", preds.len(), a.out.display());
    Ok(())
}

fn predict_clip(ck: &Checkpoint, clip: &LipClip, speaker: u32, id: &str, opts: &InferOptions) -> Result<Prediction> {
    let video = clip_tensor(&[clip], DType::F32)?;
    let norm = ck.normalizer();
    let stats = norm.speaker(speaker)?;
    let inf = ck.model.infer(&video, &[speaker], norm, opts)?;
    Ok(Prediction {
        id: id.into(),
        unit_ids: inf.unit_ids[0].clone(),
        log_f0: inf.f0_norm[0].iter().map(|z| z * stats.std + stats.mean).collect(),
        pitch_hz: inf.pitch_hz[0].clone(),
        uv: inf.uv[0].clone(),
        coarse: inf.coarse[0].clone(),
        fine: inf.fine.as_ref().map(|f| f[0].clone()),
    })
}

pub fn cmd_evaluate(a: &EvaluateArgs, argv: &[String]) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    let corpus = load_split(&a.data, &a.split)?;
    let utts: Vec<&SyntheticUtterance> = corpus.utterances.iter().collect();
    let mut inputs = BTreeMap::new();
    inputs.insert("corpus".into(), corpus_hash(&utts));
    let mut seed = cfg.infer.seed;
    let preds = if a.ground_truth {
        utts.iter().map(|u| Prediction::ground_truth(u)).collect()
    } else if let Some(dir) = &a.predictions {
        let mut h = Sha256::new();
        let preds = utts
            .iter()
            .map(|u| {
                let p = read_prediction(&dir.join(&u.id), &u.id, u.units.codebook_size)?;
                for name in ["mel_coarse.bin", "mel_fine.bin", "pitch.bin", "log_f0.bin", "units.bin"] {
                    let f = dir.join(&u.id).join(name);
                    if f.exists() {
                        h.update(fs::read(f)?);
                    }
                }
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        inputs.insert("predictions".into(), hex::encode(h.finalize()));
        preds
    } else if let Some(dir) = &a.checkpoint {
        let opts = infer_options(&mut cfg, &a.infer)?;
        seed = opts.seed;
        let ck = load_for_inference(dir, a.infer.coarse_only)?;
        cfg.model = ck.manifest.model.clone();
        cfg.train = ck.manifest.train.clone();
        inputs.insert("checkpoint".into(), file_sha256(&dir.join(PARAMS_FILE))?);
        predict(&ck.model, ck.normalizer(), &utts, &opts, cfg.infer.batch_size)?
    } else {
        return Err(invalid("give one of --checkpoint, --predictions or --ground-truth"));
    };
    let report = evaluate(&preds, &utts)?;
    prepare_out(&a.out, a.force)?;
    fs::write(a.out.join(REPORT_FILE), report.to_jsonl()?)?;
    if a.plots {
        let plots = a.out.join("plots");
        fs::create_dir_all(&plots)?;
        for (p, u) in preds.iter().zip(&utts) {
            plot_f0(&p.pitch_hz, &u.raw_pitch.f0_hz, &plots.join(format!("{}.png", p.id)))?;
        }
    }
    write_record(&a.out, "evaluate", argv, seed, &cfg, inputs)?;
    eprintln!("{}", serde_json::to_string(&report.aggregate)?);
    Ok(())
}

/// Parses a report written by `evaluate`.
pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut aggregate = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        match v.get("aggregate") {
            Some(a) => aggregate = Some(serde_json::from_value(a.clone())?),
            None => records.push(serde_json::from_value(v)?),
        }
    }
    let aggregate = aggregate.ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: "no aggregate line".into(),
    })?;
    Ok(EvalReport { records, aggregate })
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckpointSummary {
    pub stage: u8,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub encoder_provenance: String,
    pub ablations: Vec<&'static str>,
    pub params_sha256: String,
    pub params_intact: bool,
    pub stage1_checksum: String,
    pub corpus_hash: String,
    pub parameter_counts: BTreeMap<String, usize>,
    pub final_losses: Option<BTreeMap<String, f64>>,
}

pub fn inspect_checkpoint(dir: &Path) -> Result<CheckpointSummary> {
    let ck = Checkpoint::load(dir)?;
    let m = &ck.manifest;
    let mut counts = BTreeMap::new();
    for (name, var) in ck.model.store.vars() {
        let top = name.split('.').next().unwrap_or(name).to_string();
        *counts.entry(top).or_insert(0) += var.elem_count();
    }
    Ok(CheckpointSummary {
        stage: m.stage,
        epoch: m.epoch,
        seed: m.seed,
        config_hash: m.config_hash.clone(),
        encoder_provenance: m.encoder_provenance.clone(),
        ablations: ck.model.ablations.names(),
        params_sha256: m.params_sha256.clone(),
        params_intact: file_sha256(&dir.join(PARAMS_FILE))? == m.params_sha256,
        stage1_checksum: m.stage1_checksum.clone(),
        corpus_hash: m.corpus_hash.clone(),
        parameter_counts: counts,
        final_losses: m.history.last().map(|r| r.losses.clone()),
    })
}
