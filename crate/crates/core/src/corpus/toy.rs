//! Deterministic synthetic corpora for tests and smoke runs. Every phoneme
//! owns a fixed spectral template; speakers add a smooth spectral tilt and each
//! frame carries a small within-phoneme progress ramp.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    save_corpus, DurationSequence, MelConfig, MelSpectrogram, SpeakerEmbedding, SpeakerTable,
    UtteranceRecord, Vocabulary,
};
use crate::error::{IoContext, Result, TtsError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    /// Speaker 0 is the target; the rest are supporting speakers.
    pub n_speakers: usize,
    pub target_utterances: usize,
    pub support_utterances: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub min_duration: u32,
    pub max_duration: u32,
    /// Number of non-silence symbols drawn from the vocabulary.
    pub inventory: usize,
    pub speaker_dim: usize,
    pub mel: MelConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_speakers: 3,
            target_utterances: 8,
            support_utterances: 8,
            min_phonemes: 4,
            max_phonemes: 7,
            min_duration: 3,
            max_duration: 7,
            inventory: 12,
            speaker_dim: 32,
            mel: MelConfig::default(),
        }
    }
}

pub struct ToyCorpus {
    pub vocab: Vocabulary,
    pub speakers: SpeakerTable,
    pub target: String,
    pub records: Vec<UtteranceRecord>,
    pub mel: MelConfig,
}

pub fn speaker_name(i: usize) -> String {
    format!("spk{i}")
}

/// Log-mel frame for phoneme `id` of speaker `speaker` at progress in (0, 1].
pub fn toy_frame(id: usize, speaker: usize, progress: f64, bins: usize) -> Vec<f64> {
    let b = bins as f64;
    let center = ((id * 37 + 11) % 97) as f64 / 97.0 * b;
    let width = 2.0 + (id % 5) as f64 * 0.12 * b;
    let second = ((id * 53 + 29) % 89) as f64 / 89.0 * b;
    let tilt = 0.6 * ((speaker as f64 + 1.0) * 0.9).sin();
    let ripple = 0.25 * (speaker as f64 * 1.7).cos();
    (0..bins)
        .map(|j| {
            let x = j as f64;
            let main = 3.0 * (-(x - center).powi(2) / (2.0 * width * width)).exp();
            let formant = 1.5 * (-(x - second).powi(2) / (2.0 * (0.6 * width).powi(2))).exp();
            let spk = tilt * (x / b - 0.5) + ripple * (x * 0.25).sin();
            -4.0 + main + formant + spk + 0.4 * progress * (x / b - 0.3)
        })
        .collect()
}

pub fn toy_mel(ids: &[usize], durations: &DurationSequence, speaker: usize, cfg: &MelConfig) -> Result<MelSpectrogram> {
    let t = durations.total();
    if t == 0 {
        return Err(TtsError::Validation("toy utterance with no frames".into()));
    }
    let mut data = Array2::zeros((t, cfg.n_mels));
    let mut row = 0;
    for (&id, &d) in ids.iter().zip(durations.frames()) {
        for k in 0..d {
            let frame = toy_frame(id, speaker, (k + 1) as f64 / d as f64, cfg.n_mels);
            data.row_mut(row).assign(&ndarray::Array1::from(frame));
            row += 1;
        }
    }
    MelSpectrogram::new(data, cfg.hop_seconds(), cfg.sample_rate)
}

pub fn generate(cfg: &ToyConfig) -> Result<ToyCorpus> {
    if cfg.n_speakers == 0 || cfg.min_phonemes == 0 || cfg.min_phonemes > cfg.max_phonemes {
        return Err(TtsError::Config(format!("invalid toy config {cfg:?}")));
    }
    if cfg.min_duration == 0 || cfg.min_duration > cfg.max_duration {
        return Err(TtsError::Config("toy durations need 1 ≤ min ≤ max".into()));
    }
    let vocab = Vocabulary::arpabet();
    let sil = vocab.id("sil").expect("silence symbol");
    let first = vocab.id("AA").expect("vowel symbol");
    if cfg.inventory == 0 || first + cfg.inventory > vocab.len() {
        return Err(TtsError::Config(format!("toy inventory {} too large", cfg.inventory)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let speakers = SpeakerTable::new((0..cfg.n_speakers).map(|s| {
        let v: Vec<f64> = (0..cfg.speaker_dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        SpeakerEmbedding {
            speaker_id: speaker_name(s),
            vector: v.into_iter().map(|x| x / norm).collect(),
        }
    }))?;

    let mut records = Vec::new();
    for s in 0..cfg.n_speakers {
        let count = if s == 0 { cfg.target_utterances } else { cfg.support_utterances };
        for u in 0..count {
            let n = rng.random_range(cfg.min_phonemes..=cfg.max_phonemes);
            let mut ids = vec![sil];
            ids.extend((0..n).map(|_| first + rng.random_range(0..cfg.inventory)));
            ids.push(sil);
            let d: Vec<u32> = ids
                .iter()
                .map(|_| rng.random_range(cfg.min_duration..=cfg.max_duration))
                .collect();
            let durations = DurationSequence::new(d);
            let mel = toy_mel(&ids, &durations, s, &cfg.mel)?;
            records.push(UtteranceRecord {
                id: format!("{}_{u:03}", speaker_name(s)),
                speaker_id: speaker_name(s),
                phonemes: super::PhonemeSequence::new(ids, vocab.len())?,
                mel,
                durations,
                synthetic: false,
            });
        }
    }
    Ok(ToyCorpus {
        vocab,
        speakers,
        target: speaker_name(0),
        records,
        mel: cfg.mel.clone(),
    })
}

impl ToyCorpus {
    pub fn for_speaker<'a>(&'a self, speaker: &'a str) -> impl Iterator<Item = &'a UtteranceRecord> {
        self.records.iter().filter(move |r| r.speaker_id == speaker)
    }

    /// Writes `manifest.jsonl`, features, alignments and `speakers.json`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).at(dir)?;
        let manifest = save_corpus(dir, &self.records, &self.vocab)?;
        self.speakers.save(&dir.join("speakers.json"))?;
        self.vocab.save(&dir.join("vocab.json"))?;
        let mel_path = dir.join("mel.json");
        fs::write(&mel_path, serde_json::to_string_pretty(&self.mel)?).at(&mel_path)?;
        Ok(manifest)
    }
}
