//! Objective metrics: pitch error, voicing F1, unit accuracy, mel distance
//! and template-matched tone accuracy.

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{InferOptions, L2sModel, Normalizer};
use crate::signals::{tone_template, MelSpectrogram, SyntheticUtterance, N_MELS};
use crate::visual::clip_tensor;

pub const TONES: [u8; 4] = [1, 2, 3, 4];

/// RMSE in Hz over frames voiced (nonzero) in both tracks.
pub fn f0_rmse(pred_hz: &[f64], true_hz: &[f64]) -> Result<f64> {
    if pred_hz.len() != true_hz.len() {
        return Err(Error::Shape(format!("pitch tracks of {} and {} frames", pred_hz.len(), true_hz.len())));
    }
    let (sum, n) = pred_hz
        .iter()
        .zip(true_hz)
        .filter(|(p, t)| **p > 0.0 && **t > 0.0)
        .fold((0.0, 0usize), |(s, n), (p, t)| (s + (p - t).powi(2), n + 1));
    if n == 0 {
        return Err(invalid("no frame is voiced in both tracks"));
    }
    Ok((sum / n as f64).sqrt())
}

/// F1 of the voiced class. Two all-unvoiced tracks agree perfectly.
pub fn vuv_f1(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("voicing tracks of {} and {} frames", pred.len(), truth.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

fn common_len(a: usize, b: usize, what: &str) -> Result<usize> {
    if a.abs_diff(b) > 1 {
        return Err(Error::Shape(format!("{what}: {a} vs {b} frames")));
    }
    Ok(a.min(b))
}

/// Framewise exact-match rate; sequences may differ by one frame.
pub fn unit_accuracy(pred: &[u32], truth: &[u32]) -> Result<f64> {
    let n = common_len(pred.len(), truth.len(), "unit sequences")?;
    if n == 0 {
        return Err(invalid("empty unit sequence"));
    }
    let hits = pred[..n].iter().zip(&truth[..n]).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / n as f64)
}

/// Mean per-frame L1 (summed over bins) in log-mel units.
pub fn mel_l1(pred: &MelSpectrogram, truth: &MelSpectrogram) -> Result<f64> {
    let n = common_len(pred.n_frames, truth.n_frames, "mel spectrograms")?;
    if n == 0 {
        return Err(invalid("empty mel spectrogram"));
    }
    let sum: f64 = pred.data[..n * N_MELS]
        .iter()
        .zip(&truth.data[..n * N_MELS])
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum();
    Ok(sum / n as f64)
}

fn centered(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

/// Squared distance from the mean-removed segment to each mean-removed
/// template, in tone order 1..=4.
pub fn tone_distances(segment: &[f64]) -> Result<[f64; 4]> {
    if segment.len() < 2 {
        return Err(invalid(format!("tone segment needs >= 2 frames, got {}", segment.len())));
    }
    let seg = centered(segment);
    let mut out = [0.0; 4];
    for (d, tone) in out.iter_mut().zip(TONES) {
        let tmpl = centered(&tone_template(tone, seg.len())?);
        *d = seg.iter().zip(&tmpl).map(|(a, b)| (a - b).powi(2)).sum();
    }
    Ok(out)
}

/// Best-matching tone for a log-F0 segment. Ties go to the lower tone.
pub fn classify_tone(segment: &[f64]) -> Result<u8> {
    let d = tone_distances(segment)?;
    let mut best = 0;
    for k in 1..4 {
        if d[k] < d[best] {
            best = k;
        }
    }
    Ok(TONES[best])
}

/// Classifies every syllable span of a continuous log-F0 track; returns
/// the predicted tones.
pub fn classify_tones(log_f0: &[f64], spans: &[(usize, usize)]) -> Result<Vec<u8>> {
    spans
        .iter()
        .map(|&(a, b)| {
            if a >= b || b > log_f0.len() {
                return Err(invalid(format!("span {a}..{b} outside a track of {} frames", log_f0.len())));
            }
            classify_tone(&log_f0[a..b])
        })
        .collect()
}

pub fn tone_accuracy(log_f0: &[f64], spans: &[(usize, usize)], truth: &[u8]) -> Result<f64> {
    if spans.len() != truth.len() || spans.is_empty() {
        return Err(invalid(format!("{} spans for {} tone labels", spans.len(), truth.len())));
    }
    let pred = classify_tones(log_f0, spans)?;
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Model (or reference) outputs for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub unit_ids: Vec<u32>,
    /// Continuous natural-log F0, defined on every frame.
    pub log_f0: Vec<f64>,
    /// Hz with unvoiced frames set to zero.
    pub pitch_hz: Vec<f64>,
    pub uv: Vec<u8>,
    pub coarse: MelSpectrogram,
    pub fine: Option<MelSpectrogram>,
}

impl Prediction {
    /// The reference features of an utterance, for self-evaluation.
    pub fn ground_truth(u: &SyntheticUtterance) -> Self {
        let s = u.pitch.stats;
        Self {
            id: u.id.clone(),
            unit_ids: u.units.ids.clone(),
            log_f0: u.pitch.f0_log.iter().map(|z| z * s.std + s.mean).collect(),
            pitch_hz: u.raw_pitch.f0_hz.clone(),
            uv: u.raw_pitch.uv.clone(),
            coarse: u.mel.clone(),
            fine: Some(u.mel.clone()),
        }
    }

    pub fn output_mel(&self) -> &MelSpectrogram {
        self.fine.as_ref().unwrap_or(&self.coarse)
    }
}

/// Runs inference on utterances sharing one length per batch.
pub fn predict(
    model: &L2sModel,
    norm: &Normalizer,
    utts: &[&SyntheticUtterance],
    opts: &InferOptions,
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(utts.len());
    for (bi, chunk) in utts.chunks(batch_size.max(1)).enumerate() {
        let clips: Vec<_> = chunk.iter().map(|u| &u.clip).collect();
        let video = clip_tensor(&clips, DType::F32)?;
        let speakers: Vec<u32> = chunk.iter().map(|u| u.speaker_id).collect();
        let opts = InferOptions {
            seed: crate::signals::corpus::stream_seed(opts.seed, bi as u64),
            ..*opts
        };
        let inf = model.infer(&video, &speakers, norm, &opts)?;
        for (k, u) in chunk.iter().enumerate() {
            let stats = norm.speaker(u.speaker_id)?;
            out.push(Prediction {
                id: u.id.clone(),
                unit_ids: inf.unit_ids[k].clone(),
                log_f0: inf.f0_norm[k].iter().map(|z| z * stats.std + stats.mean).collect(),
                pitch_hz: inf.pitch_hz[k].clone(),
                uv: inf.uv[k].clone(),
                coarse: inf.coarse[k].clone(),
                fine: inf.fine.as_ref().map(|f| f[k].clone()),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker_id: u32,
    /// `None` when the two tracks share no voiced frame.
    pub f0_rmse_voiced: Option<f64>,
    pub vuv_f1: f64,
    pub unit_accuracy: f64,
    pub mel_l1: f64,
    pub mel_l1_coarse: f64,
    pub mel_l1_fine: Option<f64>,
    pub tone_accuracy: f64,
    pub predicted_tones: Vec<u8>,
    pub true_tones: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub utterances: usize,
    pub f0_rmse_voiced: Option<f64>,
    pub vuv_f1: f64,
    pub unit_accuracy: f64,
    pub mel_l1: f64,
    pub mel_l1_coarse: f64,
    pub mel_l1_fine: Option<f64>,
    pub tone_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Sorted by utterance id.
    pub records: Vec<UtteranceRecord>,
    pub aggregate: Aggregate,
}

pub fn evaluate_utterance(pred: &Prediction, u: &SyntheticUtterance) -> Result<UtteranceRecord> {
    let n = common_len(pred.pitch_hz.len(), u.raw_pitch.f0_hz.len(), "pitch tracks")?;
    let f0 = match f0_rmse(&pred.pitch_hz[..n], &u.raw_pitch.f0_hz[..n]) {
        Ok(v) => Some(v),
        Err(Error::InvalidInput(_)) => None,
        Err(e) => return Err(e),
    };
    let nuv = common_len(pred.uv.len(), u.raw_pitch.uv.len(), "voicing tracks")?;
    let true_tones: Vec<u8> = u.tone_labels.iter().map(|t| t.get()).collect();
    let predicted_tones = classify_tones(&pred.log_f0, &u.tone_spans)?;
    let hits = predicted_tones.iter().zip(&true_tones).filter(|(a, b)| a == b).count();
    let mel_l1_coarse = mel_l1(&pred.coarse, &u.mel)?;
    let mel_l1_fine = pred.fine.as_ref().map(|f| mel_l1(f, &u.mel)).transpose()?;
    Ok(UtteranceRecord {
        id: u.id.clone(),
        speaker_id: u.speaker_id,
        f0_rmse_voiced: f0,
        vuv_f1: vuv_f1(&pred.uv[..nuv], &u.raw_pitch.uv[..nuv])?,
        unit_accuracy: unit_accuracy(&pred.unit_ids, &u.units.ids)?,
        mel_l1: mel_l1_fine.unwrap_or(mel_l1_coarse),
        mel_l1_coarse,
        mel_l1_fine,
        tone_accuracy: hits as f64 / true_tones.len().max(1) as f64,
        predicted_tones,
        true_tones,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Aggregates are plain means of the per-utterance records.
pub fn evaluate(preds: &[Prediction], utts: &[&SyntheticUtterance]) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(invalid("nothing to evaluate"));
    }
    if preds.len() != utts.len() {
        return Err(invalid(format!("{} predictions for {} utterances", preds.len(), utts.len())));
    }
    let mut records = Vec::with_capacity(utts.len());
    for u in utts {
        let p = preds
            .iter()
            .find(|p| p.id == u.id)
            .ok_or_else(|| invalid(format!("no prediction for {}", u.id)))?;
        records.push(evaluate_utterance(p, u)?);
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let r = &records;
    let fine = if r.iter().all(|x| x.mel_l1_fine.is_some()) {
        mean(r.iter().filter_map(|x| x.mel_l1_fine))
    } else {
        None
    };
    let aggregate = Aggregate {
        utterances: r.len(),
        f0_rmse_voiced: mean(r.iter().filter_map(|x| x.f0_rmse_voiced)),
        vuv_f1: mean(r.iter().map(|x| x.vuv_f1)).unwrap_or(0.0),
        unit_accuracy: mean(r.iter().map(|x| x.unit_accuracy)).unwrap_or(0.0),
        mel_l1: mean(r.iter().map(|x| x.mel_l1)).unwrap_or(0.0),
        mel_l1_coarse: mean(r.iter().map(|x| x.mel_l1_coarse)).unwrap_or(0.0),
        mel_l1_fine: fine,
        tone_accuracy: mean(r.iter().map(|x| x.tone_accuracy)).unwrap_or(0.0),
    };
    Ok(EvalReport { records, aggregate })
}

impl EvalReport {
    /// One JSON record per utterance, then the aggregate.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        s.push_str(&serde_json::to_string(&serde_json::json!({ "aggregate": self.aggregate }))?);
        s.push('\n');
        Ok(s)
    }
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 240;

/// Overlay of predicted (red) and reference (blue) voiced pitch as a PNG.
pub fn plot_f0(pred_hz: &[f64], true_hz: &[f64], path: &Path) -> Result<()> {
    let mut img = image::RgbImage::from_pixel(PLOT_W, PLOT_H, image::Rgb([255, 255, 255]));
    let n = pred_hz.len().max(true_hz.len()).max(2);
    let top = pred_hz.iter().chain(true_hz).cloned().fold(1.0, f64::max) * 1.1;
    let mut draw = |track: &[f64], color: [u8; 3]| {
        for (i, &hz) in track.iter().enumerate() {
            if hz <= 0.0 {
                continue;
            }
            let x = (i as f64 / (n - 1) as f64 * (PLOT_W - 1) as f64) as u32;
            let y = ((1.0 - hz / top) * (PLOT_H - 1) as f64).clamp(0.0, (PLOT_H - 2) as f64) as u32;
            for dy in 0..2 {
                img.put_pixel(x, y + dy, image::Rgb(color));
            }
        }
    };
    draw(true_hz, [40, 80, 220]);
    draw(pred_hz, [220, 40, 40]);
    img.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn f0_rmse_examples() {
        let t = [0.0, 100.0, 120.0, 0.0, 130.0];
        assert_eq!(f0_rmse(&t, &t).unwrap(), 0.0);
        let p: Vec<f64> = t.iter().map(|v| if *v > 0.0 { v + 10.0 } else { 0.0 }).collect();
        assert!((f0_rmse(&p, &t).unwrap() - 10.0).abs() < 1e-12);
        assert!(f0_rmse(&[100.0, 0.0], &[0.0, 100.0]).is_err());
        assert!(f0_rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn vuv_examples() {
        assert_eq!(vuv_f1(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert!((vuv_f1(&[1, 1, 1, 1], &[1, 1, 0, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(vuv_f1(&[0, 0, 0], &[0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn unit_accuracy_examples() {
        let a: Vec<u32> = (0..10).collect();
        assert_eq!(unit_accuracy(&a, &a).unwrap(), 1.0);
        let mut b = a.clone();
        b[3] = 99;
        assert!((unit_accuracy(&b, &a).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(unit_accuracy(&a[..9], &a).unwrap(), 1.0);
        assert!(unit_accuracy(&a[..8], &a).is_err());
    }

    #[test]
    fn random_units_hit_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let a: Vec<u32> = (0..n).map(|_| rng.random_range(0..64)).collect();
        let b: Vec<u32> = (0..n).map(|_| rng.random_range(0..64)).collect();
        assert!((unit_accuracy(&a, &b).unwrap() - 1.0 / 64.0).abs() < 0.002);
    }

    #[test]
    fn templates_classify_themselves() {
        for len in [2, 3, 9, 30] {
            for tone in TONES {
                let seg: Vec<f64> = tone_template(tone, len).unwrap().iter().map(|v| v + 4.7).collect();
                assert_eq!(classify_tone(&seg).unwrap(), tone, "tone {tone} len {len}");
            }
        }
    }

    #[test]
    fn flat_contour_is_level_tone() {
        let spans = [(0, 20)];
        assert_eq!(classify_tones(&[5.0; 20], &spans).unwrap(), vec![1]);
        assert_eq!(tone_accuracy(&[5.0; 20], &spans, &[2]).unwrap(), 0.0);
        assert!(tone_accuracy(&[5.0; 20], &[(10, 21)], &[1]).is_err());
    }

    #[test]
    fn random_contours_are_right_a_quarter_of_the_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 4000;
        let mut hits = 0;
        for _ in 0..trials {
            let seg: Vec<f64> = (0..16).map(|_| rng.random_range(-0.3..0.3)).collect();
            let truth = TONES[rng.random_range(0..4)];
            hits += (classify_tone(&seg).unwrap() == truth) as usize;
        }
        assert!((hits as f64 / trials as f64 - 0.25).abs() < 0.03);
    }

    fn brute_force_tone(seg: &[f64]) -> u8 {
        let m = seg.iter().sum::<f64>() / seg.len() as f64;
        let mut best = (f64::INFINITY, 0);
        for tone in 1..=4u8 {
            let t = tone_template(tone, seg.len()).unwrap();
            let tm = t.iter().sum::<f64>() / t.len() as f64;
            let d: f64 = seg.iter().zip(&t).map(|(s, v)| ((s - m) - (v - tm)).powi(2)).sum();
            if d < best.0 {
                best = (d, tone);
            }
        }
        best.1
    }

    #[test]
    fn plot_writes_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f0.png");
        plot_f0(&[100.0, 0.0, 110.0], &[105.0, 0.0, 0.0], &p).unwrap();
        assert!(image::open(&p).is_ok());
    }

    proptest! {
        #[test]
        fn classification_matches_exhaustive_search(seg in proptest::collection::vec(-1.0f64..1.0, 2..40)) {
            prop_assert_eq!(classify_tone(&seg).unwrap(), brute_force_tone(&seg));
        }

        #[test]
        fn rates_are_bounded(p in proptest::collection::vec(0u8..2, 1..50), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<u8> = p.iter().map(|_| rng.random_range(0..2)).collect();
            let f = vuv_f1(&p, &t).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            let a: Vec<u32> = p.iter().map(|&v| v as u32).collect();
            let b: Vec<u32> = t.iter().map(|&v| v as u32).collect();
            let acc = unit_accuracy(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
        }
    }
}
