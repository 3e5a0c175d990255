//! Phoneme duration models. The separate variant has its own phoneme encoder
//! and an affine speaker projection; the joint variant reads the acoustic
//! model's phoneme embeddings and prosody latent.

use std::collections::HashSet;

use lrtts_nn::layers::{BiLstm, Conv1d, Embedding, Linear};
use lrtts_nn::{Graph, Grads, Mat, ParamStore, Var};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DurationSequence, PhonemeSequence, SpeakerTable, UtteranceRecord};
use crate::error::{Result, TtsError};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState, LrSchedule};

/// Floor applied to predictions inside the logarithm.
pub const PRED_FLOOR: f64 = 1e-4;
pub const DEFAULT_AUX_WEIGHT: f64 = 0.025;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationMode {
    Separate,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationConfig {
    pub mode: DurationMode,
    pub vocab_size: usize,
    pub speaker_dim: usize,
    pub hidden: usize,
    pub encoder_convs: usize,
    pub encoder_kernel: usize,
    pub speaker_proj: usize,
    pub dropout: f64,
    /// Joint mode input widths: phoneme embedding and latent.
    pub embedding_dim: usize,
    pub latent_dim: usize,
}

impl DurationConfig {
    pub fn separate(vocab_size: usize, speaker_dim: usize, hidden: usize) -> Self {
        Self {
            mode: DurationMode::Separate,
            vocab_size,
            speaker_dim,
            hidden,
            encoder_convs: 3,
            encoder_kernel: 3,
            speaker_proj: (hidden / 4).max(1),
            dropout: 0.1,
            embedding_dim: 0,
            latent_dim: 0,
        }
    }

    pub fn joint(embedding_dim: usize, latent_dim: usize) -> Self {
        Self {
            mode: DurationMode::Joint,
            vocab_size: 0,
            speaker_dim: 0,
            hidden: 0,
            encoder_convs: 0,
            encoder_kernel: 3,
            speaker_proj: 0,
            dropout: 0.0,
            embedding_dim,
            latent_dim,
        }
    }
}

#[derive(Clone, Debug)]
enum Net {
    Separate {
        embedding: Embedding,
        convs: Vec<Conv1d>,
        rnn: BiLstm,
        speaker: Linear,
        out: Linear,
    },
    Joint {
        out: Linear,
    },
}

pub struct DurationModel {
    pub cfg: DurationConfig,
    pub params: ParamStore,
    net: Net,
}

impl DurationModel {
    pub fn new(cfg: DurationConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let net = match cfg.mode {
            DurationMode::Separate => {
                let h = cfg.hidden;
                if h < 2 || !h.is_multiple_of(2) || cfg.encoder_kernel.is_multiple_of(2) || cfg.vocab_size == 0 {
                    return Err(TtsError::Config(format!("invalid duration config {cfg:?}")));
                }
                let embedding = Embedding::new(&mut s, "dur.embedding", cfg.vocab_size, h, &mut rng);
                let convs = (0..cfg.encoder_convs)
                    .map(|i| Conv1d::same(&mut s, &format!("dur.conv{i}"), h, h, cfg.encoder_kernel, &mut rng))
                    .collect();
                let rnn = BiLstm::new(&mut s, "dur.blstm", h, h / 2, &mut rng);
                let speaker = Linear::new(&mut s, "dur.speaker", cfg.speaker_dim, cfg.speaker_proj, &mut rng);
                let out = Linear::new(&mut s, "dur.out", h + cfg.speaker_proj, 1, &mut rng);
                s.get_mut(out.b.unwrap()).fill(1.0);
                Net::Separate { embedding, convs, rnn, speaker, out }
            }
            DurationMode::Joint => {
                let out = Linear::new(&mut s, "dur.joint", cfg.embedding_dim + cfg.latent_dim, 1, &mut rng);
                s.get_mut(out.b.unwrap()).fill(1.0);
                Net::Joint { out }
            }
        };
        Ok(Self { cfg, params: s, net })
    }

    pub fn from_params(cfg: DurationConfig, stored: &ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.params.load_values_from(stored)?;
        Ok(m)
    }

    /// Sets the output bias, e.g. to the mean training duration.
    pub fn set_output_bias(&mut self, value: f64) {
        let out = match &self.net {
            Net::Separate { out, .. } | Net::Joint { out } => out,
        };
        self.params.get_mut(out.b.unwrap()).fill(value);
    }

    /// Separate mode: `N × 1` non-negative predictions.
    pub fn forward_separate(&self, g: &mut Graph, phonemes: &PhonemeSequence, speaker: &[f64]) -> Result<Var> {
        let Net::Separate { embedding, convs, rnn, speaker: spk, out } = &self.net else {
            return Err(TtsError::Config("joint duration model needs phoneme embeddings and a latent".into()));
        };
        if speaker.len() != self.cfg.speaker_dim {
            return Err(TtsError::Shape(format!(
                "speaker embedding of width {}, duration model expects {}",
                speaker.len(),
                self.cfg.speaker_dim
            )));
        }
        if let Some(&bad) = phonemes.ids().iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(TtsError::Validation(format!("phoneme id {bad} outside model vocabulary")));
        }
        let mut x = embedding.forward(g, phonemes.ids());
        for conv in convs {
            let y = conv.forward(g, x);
            let y = g.relu(y);
            x = g.dropout(y, self.cfg.dropout);
        }
        let enc = rnn.forward(g, x);
        let enc = g.dropout(enc, self.cfg.dropout);
        let sv = g.constant(Array2::from_shape_vec((1, speaker.len()), speaker.to_vec()).expect("row"));
        let sp = spk.forward(g, sv);
        let sp = g.broadcast_rows(sp, phonemes.len());
        let h = g.concat_cols(&[enc, sp]);
        let y = out.forward(g, h);
        Ok(g.relu(y))
    }

    /// Joint mode: `[x̃ ‖ z] → dense → ReLU`.
    pub fn forward_joint(&self, g: &mut Graph, x_tilde: Var, z: Var) -> Result<Var> {
        let Net::Joint { out } = &self.net else {
            return Err(TtsError::Config("separate duration model does not take a latent".into()));
        };
        let (n, xd) = g.shape(x_tilde);
        let (zr, zd) = g.shape(z);
        if xd != self.cfg.embedding_dim || zd != self.cfg.latent_dim || zr != 1 {
            return Err(TtsError::Shape(format!(
                "joint input {n}×{xd} with latent {zr}×{zd}, expected widths {} and {}",
                self.cfg.embedding_dim, self.cfg.latent_dim
            )));
        }
        let zb = g.broadcast_rows(z, n);
        let h = g.concat_cols(&[x_tilde, zb]);
        let y = out.forward(g, h);
        Ok(g.relu(y))
    }
}

pub fn predict_durations(model: &DurationModel, phonemes: &PhonemeSequence, speaker: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new(&model.params);
    let y = model.forward_separate(&mut g, phonemes, speaker)?;
    Ok(g.value(y).iter().copied().collect())
}

pub fn predict_durations_joint(model: &DurationModel, x_tilde: &Mat, z: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new(&model.params);
    let x = g.constant(x_tilde.clone());
    let zv = g.constant(Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row"));
    let y = model.forward_joint(&mut g, x, zv)?;
    Ok(g.value(y).iter().copied().collect())
}

fn check_len(pred: usize, gt: usize) -> Result<()> {
    if pred != gt {
        return Err(TtsError::Shape(format!("{pred} predicted durations for {gt} targets")));
    }
    Ok(())
}

fn log_targets(gt: &DurationSequence) -> Vec<f64> {
    gt.frames().iter().map(|&d| (d.max(1) as f64).ln()).collect()
}

/// Mean of `(ln max(pred, 1e-4) − ln max(gt, 1))²`.
pub fn duration_loss(pred: &[f64], gt: &DurationSequence) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(log_targets(gt))
        .map(|(&p, t)| (p.max(PRED_FLOOR).ln() - t).powi(2))
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn duration_loss_graph(g: &mut Graph, pred: Var, gt: &DurationSequence) -> Result<Var> {
    check_len(g.shape(pred).0, gt.len())?;
    let t = g.constant(Array2::from_shape_vec((gt.len(), 1), log_targets(gt)).expect("column"));
    let p = g.max_scalar(pred, PRED_FLOOR);
    let lp = g.ln(p);
    let d = g.sub(lp, t);
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// `weight × mean |pred − gt|` in frames.
pub fn joint_aux_loss(pred: &[f64], gt: &DurationSequence, weight: f64) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(gt.frames()).map(|(&p, &d)| (p - d as f64).abs()).sum();
    Ok(weight * sum / pred.len() as f64)
}

pub fn joint_aux_loss_graph(g: &mut Graph, pred: Var, gt: &DurationSequence, weight: f64) -> Result<Var> {
    check_len(g.shape(pred).0, gt.len())?;
    let t = g.constant(Array2::from_shape_fn((gt.len(), 1), |(i, _)| gt.frames()[i] as f64));
    let d = g.sub(pred, t);
    let a = g.abs(d);
    let m = g.mean(a);
    Ok(g.scale(m, weight))
}

/// Rounds half away from zero and floors every phoneme at one frame.
pub fn quantize_durations(pred: &[f64]) -> DurationSequence {
    DurationSequence::new(
        pred.iter()
            .map(|&p| {
                let r = if p.is_finite() { p.max(0.0).round() } else { 1.0 };
                (r as u32).max(1)
            })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub clip_norm: f64,
}

impl Default for DurationTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2_000,
            batch_size: 32,
            seed: 0,
            lr: LrSchedule {
                warmup_steps: 100,
                decay_end: 20_000,
                ..LrSchedule::default()
            },
            adam: AdamConfig::default(),
            clip_norm: 1.0,
        }
    }
}

/// Per-step mean loss of a training run.
pub struct DurationTrainLog {
    pub losses: Vec<f64>,
}

/// Deterministic index stream: shuffled epochs, cut into batches.
pub(crate) fn batch_indices(n: usize, batch: usize, steps: u64, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let mut b = Vec::with_capacity(batch);
        while b.len() < batch.min(n.max(1)) {
            if order.is_empty() {
                order = (0..n).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            b.push(order.pop().expect("refilled"));
        }
        out.push(b);
    }
    out
}

/// Trains a separate-mode model on every record (ground truth and synthetic).
/// The output bias starts at the mean training duration.
pub fn train_duration_model(
    records: &[UtteranceRecord],
    speakers: &SpeakerTable,
    model_cfg: DurationConfig,
    train: &DurationTrainConfig,
) -> Result<(DurationModel, DurationTrainLog)> {
    if records.is_empty() {
        return Err(TtsError::Validation("duration training needs at least one record".into()));
    }
    let mut model = DurationModel::new(model_cfg, train.seed)?;
    let (sum, count) = records
        .iter()
        .flat_map(|r| r.durations.frames())
        .fold((0.0, 0usize), |(s, c), &d| (s + d as f64, c + 1));
    model.set_output_bias(sum / count.max(1) as f64);
    let log = continue_training(&mut model, records, speakers, train)?;
    Ok((model, log))
}

pub fn continue_training(
    model: &mut DurationModel,
    records: &[UtteranceRecord],
    speakers: &SpeakerTable,
    train: &DurationTrainConfig,
) -> Result<DurationTrainLog> {
    let mut adam = AdamState::new(train.adam.clone(), &model.params);
    let frozen = HashSet::new();
    let mut losses = Vec::with_capacity(train.steps as usize);
    for (step, batch) in batch_indices(records.len(), train.batch_size, train.steps, train.seed)
        .into_iter()
        .enumerate()
    {
        let mut grads = Grads::zeros_like(&model.params);
        let mut total = 0.0;
        for (k, &i) in batch.iter().enumerate() {
            let r = &records[i];
            let spk = &speakers.get(&r.speaker_id)?.vector;
            let seed = train.seed ^ ((step as u64) << 20) ^ k as u64;
            let mut g = Graph::new(&model.params).with_dropout(seed);
            let pred = model.forward_separate(&mut g, &r.phonemes, spk)?;
            let loss = duration_loss_graph(&mut g, pred, &r.durations)?;
            total += g.scalar(loss);
            grads.accumulate(g.backward(loss).param_grads());
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        clip_grad_norm(&mut grads, train.clip_norm);
        adam_step(&mut model.params, &grads, &mut adam, train.lr.lr(step as u64), &frozen)?;
        losses.push(total / n);
    }
    Ok(DurationTrainLog { losses })
}

/// Inference-mode mean log-domain loss over `records`.
pub fn evaluate_duration_model(model: &DurationModel, records: &[UtteranceRecord], speakers: &SpeakerTable) -> Result<f64> {
    let mut total = 0.0;
    for r in records {
        let p = predict_durations(model, &r.phonemes, &speakers.get(&r.speaker_id)?.vector)?;
        total += duration_loss(&p, &r.durations)?;
    }
    Ok(total / records.len().max(1) as f64)
}
