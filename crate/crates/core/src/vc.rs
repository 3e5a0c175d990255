//! Voice conversion for data augmentation: a phoneme encoder conditioned on a
//! speaker embedding, a strided prosody bottleneck over the reference mel and
//! a parallel convolutional decoder.

use std::collections::HashSet;

use lrtts_nn::layers::{Conv1d, Embedding, Linear};
use lrtts_nn::{Graph, Grads, Mat, ParamStore, Var};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DurationSequence, MelSpectrogram, PhonemeSequence, SpeakerTable, UtteranceRecord};
use crate::duration::batch_indices;
use crate::error::{Result, TtsError};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VcConfig {
    pub vocab_size: usize,
    pub n_mels: usize,
    pub speaker_dim: usize,
    pub phoneme_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub encoder_convs: usize,
    pub decoder_convs: usize,
    pub bottleneck_channels: usize,
}

impl VcConfig {
    pub fn new(vocab_size: usize, n_mels: usize, speaker_dim: usize) -> Self {
        Self {
            vocab_size,
            n_mels,
            speaker_dim,
            phoneme_dim: 64,
            hidden: 256,
            kernel: 5,
            encoder_convs: 3,
            decoder_convs: 4,
            bottleneck_channels: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_channels >= self.n_mels {
            return Err(TtsError::Config(format!(
                "prosody bottleneck of {} channels must be narrower than {} mel bins",
                self.bottleneck_channels, self.n_mels
            )));
        }
        if self.kernel.is_multiple_of(2) || self.hidden == 0 || self.vocab_size == 0 {
            return Err(TtsError::Config(format!("invalid voice-conversion config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Net {
    embedding: Embedding,
    encoder: Vec<Conv1d>,
    bottleneck: [Conv1d; 2],
    decoder: Vec<Conv1d>,
    out: Linear,
}

pub struct VcModel {
    pub cfg: VcConfig,
    pub params: ParamStore,
    net: Net,
}

/// Prosody frames for `t` mel frames: two stride-2 reductions.
pub fn prosody_len(t: usize) -> usize {
    t.div_ceil(4)
}

impl VcModel {
    pub fn new(cfg: VcConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (h, k) = (cfg.hidden, cfg.kernel);
        let embedding = Embedding::new(&mut s, "vc.embedding", cfg.vocab_size, cfg.phoneme_dim, &mut rng);
        let mut width = cfg.phoneme_dim + cfg.speaker_dim;
        let encoder = (0..cfg.encoder_convs)
            .map(|i| {
                let c = Conv1d::same(&mut s, &format!("vc.enc{i}"), width, h, k, &mut rng);
                width = h;
                c
            })
            .collect();
        let enc_width = width;
        let bottleneck = [
            Conv1d::new(&mut s, "vc.prosody0", cfg.n_mels, h, 5, 2, 2, &mut rng),
            Conv1d::new(&mut s, "vc.prosody1", h, cfg.bottleneck_channels, 5, 2, 2, &mut rng),
        ];
        let mut width = enc_width + cfg.bottleneck_channels + cfg.speaker_dim;
        let decoder = (0..cfg.decoder_convs)
            .map(|i| {
                let c = Conv1d::same(&mut s, &format!("vc.dec{i}"), width, h, k, &mut rng);
                width = h;
                c
            })
            .collect();
        let out = Linear::new(&mut s, "vc.out", width, cfg.n_mels, &mut rng);
        Ok(Self {
            cfg,
            params: s,
            net: Net {
                embedding,
                encoder,
                bottleneck,
                decoder,
                out,
            },
        })
    }

    pub fn from_params(cfg: VcConfig, stored: &ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.params.load_values_from(stored)?;
        Ok(m)
    }

    fn speaker_rows(&self, g: &mut Graph, speaker: &[f64], rows: usize) -> Result<Var> {
        if speaker.len() != self.cfg.speaker_dim {
            return Err(TtsError::Shape(format!(
                "speaker embedding of width {}, conversion model expects {}",
                speaker.len(),
                self.cfg.speaker_dim
            )));
        }
        Ok(g.constant(Array2::from_shape_fn((rows, speaker.len()), |(_, j)| speaker[j])))
    }

    /// Upsampled phoneme embeddings with the speaker appended; the matrix the
    /// encoder convolutions consume.
    pub fn encoder_input(
        &self,
        g: &mut Graph,
        phonemes: &PhonemeSequence,
        durations: &DurationSequence,
        speaker: &[f64],
    ) -> Result<Var> {
        if durations.len() != phonemes.len() {
            return Err(TtsError::Alignment(format!(
                "{} durations for {} phonemes",
                durations.len(),
                phonemes.len()
            )));
        }
        let t = durations.total();
        if t == 0 {
            return Err(TtsError::Validation("all durations are zero".into()));
        }
        if let Some(&bad) = phonemes.ids().iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(TtsError::Validation(format!("phoneme id {bad} outside model vocabulary")));
        }
        let frame_ids: Vec<usize> = durations
            .frame_to_phoneme()
            .into_iter()
            .map(|p| phonemes.ids()[p])
            .collect();
        let emb = self.net.embedding.forward(g, &frame_ids);
        let spk = self.speaker_rows(g, speaker, t)?;
        Ok(g.concat_cols(&[emb, spk]))
    }

    /// Frame-level phoneme hiddens, `T × hidden`.
    pub fn encode_phonemes(
        &self,
        g: &mut Graph,
        phonemes: &PhonemeSequence,
        durations: &DurationSequence,
        speaker: &[f64],
    ) -> Result<Var> {
        let mut x = self.encoder_input(g, phonemes, durations, speaker)?;
        for conv in &self.net.encoder {
            let y = conv.forward(g, x);
            x = g.relu(y);
        }
        Ok(x)
    }

    /// `ceil(T/4) × C` prosody features.
    pub fn prosody_encode(&self, g: &mut Graph, mel: Var) -> Var {
        let h = self.net.bottleneck[0].forward(g, mel);
        let h = g.relu(h);
        self.net.bottleneck[1].forward(g, h)
    }

    pub fn decode(&self, g: &mut Graph, hiddens: Var, prosody: Var, speaker: &[f64]) -> Result<Var> {
        let t = g.shape(hiddens).0;
        let p = g.shape(prosody).0;
        let idx: Vec<usize> = (0..t).map(|i| (i / 4).min(p - 1)).collect();
        let up = g.gather_rows(prosody, idx);
        let spk = self.speaker_rows(g, speaker, t)?;
        let mut x = g.concat_cols(&[hiddens, up, spk]);
        for conv in &self.net.decoder {
            let y = conv.forward(g, x);
            x = g.relu(y);
        }
        Ok(self.net.out.forward(g, x))
    }

    /// Reconstruction or conversion of `mel` with `speaker` as the output voice.
    pub fn forward(
        &self,
        g: &mut Graph,
        phonemes: &PhonemeSequence,
        durations: &DurationSequence,
        mel: &Mat,
        speaker: &[f64],
    ) -> Result<Var> {
        if mel.nrows() != durations.total() || mel.ncols() != self.cfg.n_mels {
            return Err(TtsError::Shape(format!(
                "mel {:?} for {} frames of {} bins",
                mel.dim(),
                durations.total(),
                self.cfg.n_mels
            )));
        }
        let h = self.encode_phonemes(g, phonemes, durations, speaker)?;
        let m = g.constant(mel.clone());
        let p = self.prosody_encode(g, m);
        self.decode(g, h, p, speaker)
    }

    pub fn prosody(&self, mel: &Mat) -> Mat {
        let mut g = Graph::new(&self.params);
        let m = g.constant(mel.clone());
        let p = self.prosody_encode(&mut g, m);
        g.value(p).clone()
    }
}

/// Converts `source` to the voice of `target`; durations and frame count are
/// kept.
pub fn vc_convert(source: &UtteranceRecord, target: &[f64], model: &VcModel) -> Result<MelSpectrogram> {
    let mut g = Graph::new(&model.params);
    let out = model.forward(&mut g, &source.phonemes, &source.durations, source.mel.data(), target)?;
    let data = g.value(out).clone();
    let floor = crate::corpus::LOG_FLOOR.ln();
    MelSpectrogram::new(data.mapv(|v| v.max(floor)), source.mel.frame_hop_s, source.mel.sample_rate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VcTrainConfig {
    pub multi_speaker_steps: u64,
    pub target_epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub clip_norm: f64,
}

impl Default for VcTrainConfig {
    fn default() -> Self {
        Self {
            multi_speaker_steps: 500,
            target_epochs: 32,
            batch_size: 8,
            seed: 0,
            lr: LrSchedule {
                warmup_steps: 50,
                decay_end: 10_000,
                ..LrSchedule::default()
            },
            adam: AdamConfig::default(),
            clip_norm: 1.0,
        }
    }
}

impl VcTrainConfig {
    pub fn paper() -> Self {
        Self {
            multi_speaker_steps: 50_000,
            target_epochs: 320,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct VcTrainLog {
    /// Mean batch L1 per step, both phases.
    pub losses: Vec<f64>,
    pub phase_one_steps: usize,
    /// Ids of every record sampled during the target-only phase.
    pub phase_two_ids: Vec<String>,
}

fn l1(g: &mut Graph, pred: Var, target: &Mat) -> Var {
    let t = g.constant(target.clone());
    let d = g.sub(pred, t);
    let a = g.abs(d);
    g.mean(a)
}

/// Two phases: multi-speaker steps over every record, then target-only epochs.
pub fn vc_train(
    records: &[UtteranceRecord],
    speakers: &SpeakerTable,
    target: &str,
    model_cfg: VcConfig,
    train: &VcTrainConfig,
) -> Result<(VcModel, VcTrainLog)> {
    let target_idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].speaker_id == target).collect();
    if target_idx.is_empty() {
        return Err(TtsError::UnknownSpeaker(target.to_string()));
    }
    let mut model = VcModel::new(model_cfg, train.seed)?;
    let mut adam = AdamState::new(train.adam.clone(), &model.params);
    let mut log = VcTrainLog::default();
    let mut step = 0u64;

    let mut run_batch = |model: &mut VcModel, batch: &[usize], step: u64| -> Result<f64> {
        let mut grads = Grads::zeros_like(&model.params);
        let mut total = 0.0;
        for &i in batch {
            let r = &records[i];
            let spk = &speakers.get(&r.speaker_id)?.vector;
            let mut g = Graph::new(&model.params);
            let pred = model.forward(&mut g, &r.phonemes, &r.durations, r.mel.data(), spk)?;
            let loss = l1(&mut g, pred, r.mel.data());
            total += g.scalar(loss);
            grads.accumulate(g.backward(loss).param_grads());
        }
        grads.scale(1.0 / batch.len() as f64);
        clip_grad_norm(&mut grads, train.clip_norm);
        adam_step(&mut model.params, &grads, &mut adam, train.lr.lr(step), &HashSet::new())?;
        Ok(total / batch.len() as f64)
    };

    for batch in batch_indices(records.len(), train.batch_size, train.multi_speaker_steps, train.seed) {
        log.losses.push(run_batch(&mut model, &batch, step)?);
        step += 1;
    }
    log.phase_one_steps = log.losses.len();

    let per_epoch = target_idx.len().div_ceil(train.batch_size.max(1));
    let phase_two = batch_indices(
        target_idx.len(),
        train.batch_size,
        train.target_epochs * per_epoch as u64,
        train.seed.wrapping_add(1),
    );
    for batch in phase_two {
        let batch: Vec<usize> = batch.into_iter().map(|j| target_idx[j]).collect();
        log.phase_two_ids.extend(batch.iter().map(|&i| records[i].id.clone()));
        log.losses.push(run_batch(&mut model, &batch, step)?);
        step += 1;
    }
    Ok((model, log))
}

/// Mean per-cell L1 of reconstructing each record in its own voice.
pub fn reconstruction_l1(model: &VcModel, records: &[UtteranceRecord], speakers: &SpeakerTable) -> Result<f64> {
    let mut total = 0.0;
    for r in records {
        let out = vc_convert(r, &speakers.get(&r.speaker_id)?.vector, model)?;
        total += (out.data() - r.mel.data()).mapv(f64::abs).mean().unwrap_or(0.0);
    }
    Ok(total / records.len().max(1) as f64)
}

/// One synthetic target-speaker record per source record.
pub fn augment_corpus(
    model: &VcModel,
    sources: &[UtteranceRecord],
    target_speaker: &str,
    target_embedding: &[f64],
) -> Result<Vec<UtteranceRecord>> {
    if let Some(first) = sources.first() {
        if let Some(other) = sources.iter().find(|r| r.speaker_id != first.speaker_id) {
            return Err(TtsError::Validation(format!(
                "augmentation sources mix speakers {} and {}",
                first.speaker_id, other.speaker_id
            )));
        }
    }
    sources
        .iter()
        .map(|r| {
            Ok(UtteranceRecord {
                id: format!("{}__vc_{target_speaker}", r.id),
                speaker_id: target_speaker.to_string(),
                phonemes: r.phonemes.clone(),
                mel: vc_convert(r, target_embedding, model)?,
                durations: r.durations.clone(),
                synthetic: true,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VcModel {
        let mut cfg = VcConfig::new(10, 12, 4);
        cfg.hidden = 8;
        cfg.phoneme_dim = 6;
        VcModel::new(cfg, 1).unwrap()
    }

    #[test]
    fn encoder_input_width() {
        let m = VcModel::new(VcConfig::new(10, 80, 256), 1).unwrap();
        let mut g = Graph::new(&m.params);
        let p = PhonemeSequence::new(vec![1, 2], 10).unwrap();
        let x = m.encoder_input(&mut g, &p, &DurationSequence::new(vec![1, 1]), &[0.0; 256]).unwrap();
        assert_eq!(g.shape(x), (2, 320));
    }

    #[test]
    fn encoder_lengths_and_speakers() {
        let m = small();
        let p = PhonemeSequence::new(vec![1, 2, 3], 10).unwrap();
        let d = DurationSequence::new(vec![2, 0, 3]);
        let run = |spk: &[f64]| {
            let mut g = Graph::new(&m.params);
            let h = m.encode_phonemes(&mut g, &p, &d, spk).unwrap();
            g.value(h).clone()
        };
        let (a, b) = (run(&[1.0, 0.0, 0.0, 0.0]), run(&[0.0, 1.0, 0.0, 0.0]));
        assert_eq!(a.nrows(), 5);
        assert!((&a - &b).mapv(f64::abs).sum() > 0.0);
        let mut g = Graph::new(&m.params);
        assert!(m.encode_phonemes(&mut g, &p, &DurationSequence::new(vec![0, 0, 0]), &[0.0; 4]).is_err());
    }

    #[test]
    fn prosody_lengths() {
        let m = small();
        for (t, want) in [(8, 2), (9, 3), (1, 1), (120, 30)] {
            let p = m.prosody(&Array2::zeros((t, 12)));
            assert_eq!(p.dim(), (want, 8));
            assert_eq!(prosody_len(t), want);
        }
        let mel = Array2::from_shape_fn((9, 12), |(i, j)| (i * j) as f64 * 0.01);
        assert_eq!(m.prosody(&mel), m.prosody(&mel));
    }

    #[test]
    fn bottleneck_must_be_narrow() {
        let mut cfg = VcConfig::new(10, 8, 4);
        cfg.bottleneck_channels = 8;
        assert!(VcModel::new(cfg, 0).is_err());
    }
}
