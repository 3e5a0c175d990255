//! Inference (predict durations, upsample with the centroid latent, decode),
//! Griffin-Lim mel inversion, objective metrics and report emission.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::corpus::mel::{mel_filterbank, Stft};
use crate::corpus::{DurationSequence, MelConfig, MelSpectrogram, PhonemeSequence, Waveform};
use crate::duration::{predict_durations, predict_durations_joint, quantize_durations, DurationMode};
use crate::error::{IoContext, Result, TtsError};
use crate::pipeline::Bundle;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisRequest {
    pub phonemes: PhonemeSequence,
    pub speaker_id: String,
    pub durations: Option<DurationSequence>,
    pub z: Option<Vec<f64>>,
}

impl SynthesisRequest {
    pub fn new(phonemes: PhonemeSequence, speaker_id: impl Into<String>) -> Self {
        Self {
            phonemes,
            speaker_id: speaker_id.into(),
            durations: None,
            z: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    /// Durations used for upsampling (quantized predictions or the override).
    pub durations: DurationSequence,
}

pub fn synthesize(req: &SynthesisRequest, bundle: &Bundle) -> Result<MelSpectrogram> {
    synthesize_detailed(req, bundle).map(|s| s.mel)
}

pub fn synthesize_detailed(req: &SynthesisRequest, bundle: &Bundle) -> Result<Synthesis> {
    if req.speaker_id != bundle.speaker.speaker_id {
        return Err(TtsError::UnknownSpeaker(format!(
            "{} (bundle voices {})",
            req.speaker_id, bundle.speaker.speaker_id
        )));
    }
    let acoustic = &bundle.acoustic;
    if acoustic.cfg.vocab_size != bundle.vocab.len() {
        return Err(TtsError::Checkpoint("acoustic vocabulary differs from the bundle vocabulary".into()));
    }
    let z = match &req.z {
        Some(z) if z.len() != acoustic.cfg.latent_dim => {
            return Err(TtsError::Shape(format!("override latent of width {}, model uses {}", z.len(), acoustic.cfg.latent_dim)));
        }
        Some(z) if z.iter().any(|v| !v.is_finite()) => {
            return Err(TtsError::Validation("override latent is not finite".into()));
        }
        Some(z) => z.clone(),
        None => bundle.centroid.clone(),
    };
    let speaker = &bundle.speaker.vector;
    let durations = match &req.durations {
        Some(d) => {
            if d.len() != req.phonemes.len() {
                return Err(TtsError::Alignment(format!("{} override durations for {} phonemes", d.len(), req.phonemes.len())));
            }
            if d.total() == 0 {
                return Err(TtsError::Validation("override durations sum to zero".into()));
            }
            d.clone()
        }
        None => {
            let pred = match bundle.duration.cfg.mode {
                DurationMode::Separate => predict_durations(&bundle.duration, &req.phonemes, speaker)?,
                DurationMode::Joint => {
                    let x = acoustic.phoneme_embeddings(&req.phonemes)?;
                    predict_durations_joint(&bundle.duration, &x, &z)?
                }
            };
            quantize_durations(&pred)
        }
    };
    let data = acoustic.infer(&req.phonemes, speaker, &durations, &z, false)?;
    Ok(Synthesis {
        mel: MelSpectrogram::from_prediction(data, &bundle.mel)?,
        durations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GriffinLimConfig {
    pub iterations: usize,
    /// Exponent applied to the recovered magnitudes before phase estimation.
    pub power: f64,
    pub seed: u64,
}

impl Default for GriffinLimConfig {
    fn default() -> Self {
        Self {
            iterations: 60,
            power: 1.2,
            seed: 0,
        }
    }
}

/// Least-squares linear power spectrum for each mel frame, `T × n_freqs`.
pub fn mel_to_power(mel: &MelSpectrogram, cfg: &MelConfig) -> Array2<f64> {
    let fb = mel_filterbank(cfg);
    let (f, m) = fb.dim();
    let fbm = DMatrix::from_fn(f, m, |i, j| fb[[i, j]]);
    let pinv = fbm.pseudo_inverse(1e-10).expect("pseudo-inverse of a real matrix");
    let mel_power = mel.data().mapv(f64::exp);
    let t = mel_power.nrows();
    Array2::from_shape_fn((t, f), |(r, k)| {
        let mut acc = 0.0;
        for j in 0..m {
            acc += mel_power[[r, j]] * pinv[(j, k)];
        }
        acc.max(0.0)
    })
}

/// Griffin-Lim inversion of a log-mel spectrogram to `(T − 1)·hop + win`
/// samples in `[−1, 1]`.
pub fn mel_invert(mel: &MelSpectrogram, cfg: &MelConfig, gl: &GriffinLimConfig) -> Result<Waveform> {
    cfg.validate()?;
    if gl.iterations == 0 {
        return Err(TtsError::Config("Griffin-Lim needs at least one iteration".into()));
    }
    if mel.bins() != cfg.n_mels
        || mel.sample_rate != cfg.sample_rate
        || (mel.frame_hop_s - cfg.hop_seconds()).abs() > 1e-9
    {
        return Err(TtsError::Config(format!(
            "mel ({} bins, {} Hz, hop {} s) does not match the feature config",
            mel.bins(),
            mel.sample_rate,
            mel.frame_hop_s
        )));
    }
    let power = mel_to_power(mel, cfg);
    let mag = power.mapv(f64::sqrt);
    let sharpened = mag.mapv(|v| v.powf(gl.power));
    // Sharpen spectral shape without changing the overall level.
    let (a, b) = (norm(&mag), norm(&sharpened));
    let target = if b > 0.0 { sharpened * (a / b) } else { sharpened };

    let stft = Stft::new(cfg.win_length, cfg.hop_length);
    let mut rng = ChaCha8Rng::seed_from_u64(gl.seed);
    let mut spec: Array2<Complex<f64>> =
        target.mapv(|m| Complex::from_polar(m, rng.random_range(-PI..PI)));
    let mut samples = stft.inverse(&spec);
    for _ in 1..gl.iterations {
        let est = stft.forward(&samples)?;
        ndarray::Zip::from(&mut spec).and(&est).and(&target).for_each(|s, e, &m| {
            let n = e.norm();
            *s = if n > 1e-12 { e * (m / n) } else { Complex::new(m, 0.0) };
        });
        samples = stft.inverse(&spec);
    }
    if gl.power != 1.0 {
        // The sharpened magnitudes only steer phase estimation; the final
        // pass restores the recovered magnitudes.
        let est = stft.forward(&samples)?;
        ndarray::Zip::from(&mut spec).and(&est).and(&mag).for_each(|s, e, &m| {
            let n = e.norm();
            *s = if n > 1e-12 { e * (m / n) } else { Complex::new(m, 0.0) };
        });
        samples = stft.inverse(&spec);
    }
    for s in &mut samples {
        *s = s.clamp(-1.0, 1.0);
    }
    Ok(Waveform::new(samples, cfg.sample_rate))
}

fn norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelDistance {
    pub l1: f64,
    /// `pred − gt` frame counts.
    pub frame_count_delta: i64,
}

fn check_bins(pred: &MelSpectrogram, gt: &MelSpectrogram) -> Result<usize> {
    if pred.bins() != gt.bins() {
        return Err(TtsError::Shape(format!("{} predicted bins vs {} reference bins", pred.bins(), gt.bins())));
    }
    Ok(pred.frames().min(gt.frames()))
}

/// Mean absolute error over the overlapping frames, plus the length delta.
pub fn eval_mel_distance(pred: &MelSpectrogram, gt: &MelSpectrogram) -> Result<MelDistance> {
    let n = check_bins(pred, gt)?;
    let p = pred.data().slice(ndarray::s![..n, ..]);
    let g = gt.data().slice(ndarray::s![..n, ..]);
    let l1 = (&p - &g).mapv(f64::abs).mean().unwrap_or(0.0);
    Ok(MelDistance {
        l1,
        frame_count_delta: pred.frames() as i64 - gt.frames() as i64,
    })
}

/// Cepstral coefficients kept by [`mel_cepstral_distance`] (c1..c13).
pub const CEPSTRAL_ORDER: usize = 13;

fn cepstrum(frame: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let m = frame.len();
    (1..=CEPSTRAL_ORDER.min(m.saturating_sub(1)))
        .map(|k| {
            frame
                .iter()
                .enumerate()
                .map(|(j, &v)| v * (PI * k as f64 * (j as f64 + 0.5) / m as f64).cos())
                .sum::<f64>()
                * (2.0 / m as f64).sqrt()
        })
        .collect()
}

/// Mel-cepstral-style distortion in dB: DCT-II of each log-mel frame,
/// `(10/ln 10)·sqrt(2·Σ Δc²)` averaged over overlapping frames, c0 excluded.
pub fn mel_cepstral_distance(pred: &MelSpectrogram, gt: &MelSpectrogram) -> Result<f64> {
    let n = check_bins(pred, gt)?;
    if n == 0 {
        return Ok(0.0);
    }
    let k = 10.0 / std::f64::consts::LN_10;
    let total: f64 = (0..n)
        .map(|t| {
            let a = cepstrum(pred.data().index_axis(Axis(0), t));
            let b = cepstrum(gt.data().index_axis(Axis(0), t));
            let d2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
            k * (2.0 * d2).sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Root-mean-square frame error between predicted and reference durations.
pub fn duration_rmse(pred: &[f64], gt: &DurationSequence) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(TtsError::Shape(format!("{} predicted durations for {} references", pred.len(), gt.len())));
    }
    let se: f64 = pred.iter().zip(gt.frames()).map(|(p, &d)| (p - d as f64).powi(2)).sum();
    Ok((se / pred.len() as f64).sqrt())
}

/// Share of the baseline-to-recordings gap closed by `candidate`, in percent.
pub fn gap_closure(recordings: f64, baseline: f64, candidate: f64) -> Result<f64> {
    if recordings.is_nan() || baseline.is_nan() || recordings <= baseline {
        return Err(TtsError::Validation(format!(
            "gap closure needs recordings ({recordings}) above baseline ({baseline})"
        )));
    }
    Ok(100.0 * (candidate - baseline) / (recordings - baseline))
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    pub checkpoint: String,
    pub mel_l1: f64,
    pub mel_cepstral_distance: f64,
    pub frame_count_delta: i64,
    pub duration_rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub checkpoint: String,
    pub utterances: usize,
    pub mel_l1: f64,
    pub mel_cepstral_distance: f64,
    pub mean_abs_frame_count_delta: f64,
    pub duration_rmse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapClosureEntry {
    pub name: String,
    pub recordings: f64,
    pub baseline: f64,
    pub candidate: f64,
    pub percent: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub config_hash: Option<String>,
    pub alpha: Option<f64>,
    pub gamma_max: Option<f64>,
    pub seeds: BTreeMap<String, u64>,
}

impl ReportMetadata {
    pub fn from_bundle(bundle: &Bundle) -> Self {
        Self {
            config_hash: Some(bundle.config_hash.clone()),
            alpha: Some(bundle.run.alpha),
            gamma_max: Some(bundle.run.gamma_max),
            seeds: BTreeMap::from([("training".to_string(), bundle.run.seed)]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub metadata: ReportMetadata,
    pub utterances: Vec<UtteranceMetrics>,
    pub aggregate: Option<AggregateMetrics>,
    pub gap_closure: Vec<GapClosureEntry>,
}

impl EvaluationReport {
    pub fn new(metadata: ReportMetadata) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            metadata,
            utterances: Vec::new(),
            aggregate: None,
            gap_closure: Vec::new(),
        }
    }

    /// Scores one utterance; `durations` pairs predicted with reference.
    pub fn add_utterance(
        &mut self,
        id: &str,
        checkpoint: &str,
        pred: &MelSpectrogram,
        gt: &MelSpectrogram,
        durations: Option<(&[f64], &DurationSequence)>,
    ) -> Result<()> {
        let d = eval_mel_distance(pred, gt)?;
        self.utterances.push(UtteranceMetrics {
            id: id.to_string(),
            checkpoint: checkpoint.to_string(),
            mel_l1: d.l1,
            mel_cepstral_distance: mel_cepstral_distance(pred, gt)?,
            frame_count_delta: d.frame_count_delta,
            duration_rmse: durations.map(|(p, g)| duration_rmse(p, g)).transpose()?,
        });
        Ok(())
    }

    pub fn add_gap_closure(&mut self, name: &str, recordings: f64, baseline: f64, candidate: f64) -> Result<()> {
        self.gap_closure.push(GapClosureEntry {
            name: name.to_string(),
            recordings,
            baseline,
            candidate,
            percent: gap_closure(recordings, baseline, candidate)?,
        });
        Ok(())
    }

    /// Recomputes the aggregate over utterances (all must share a checkpoint).
    pub fn finalize(&mut self) -> Result<()> {
        let Some(first) = self.utterances.first() else {
            self.aggregate = None;
            return Ok(());
        };
        let checkpoint = first.checkpoint.clone();
        if self.utterances.iter().any(|u| u.checkpoint != checkpoint) {
            return Err(TtsError::Validation("utterance metrics come from different checkpoints".into()));
        }
        let n = self.utterances.len() as f64;
        let mean = |f: &dyn Fn(&UtteranceMetrics) -> f64| self.utterances.iter().map(f).sum::<f64>() / n;
        let durs: Vec<f64> = self.utterances.iter().filter_map(|u| u.duration_rmse).collect();
        self.aggregate = Some(AggregateMetrics {
            checkpoint,
            utterances: self.utterances.len(),
            mel_l1: mean(&|u| u.mel_l1),
            mel_cepstral_distance: mean(&|u| u.mel_cepstral_distance),
            mean_abs_frame_count_delta: mean(&|u| u.frame_count_delta.unsigned_abs() as f64),
            duration_rmse: (!durs.is_empty()).then(|| (durs.iter().map(|r| r * r).sum::<f64>() / durs.len() as f64).sqrt()),
        });
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        // Value maps are ordered, so keys come out sorted.
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)? + "\n")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(TtsError::Validation(format!(
                "report schema {} (expected {REPORT_SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }
}

pub fn emit_report(report: &EvaluationReport, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, report.to_json()?).at(path)
}
