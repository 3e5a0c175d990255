//! Everything synthesis needs, and nothing it does not: acoustic and duration
//! weights, the target centroid latent, speaker embedding, vocabulary and
//! feature config. The discriminator is never included.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use crate::acoustic::{AcousticConfig, AcousticModel};
use crate::corpus::{MelConfig, SpeakerEmbedding, Vocabulary};
use crate::duration::{DurationConfig, DurationModel};
use crate::error::{IoContext, Result, TtsError};

pub struct Bundle {
    pub acoustic: AcousticModel,
    pub duration: DurationModel,
    pub centroid: Vec<f64>,
    pub speaker: SpeakerEmbedding,
    pub vocab: Vocabulary,
    pub mel: MelConfig,
    /// Last stage that refreshed the bundle.
    pub stage: u8,
    pub config_hash: String,
    pub run: RunInfo,
}

/// Training settings carried into evaluation reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub alpha: f64,
    pub gamma_max: f64,
    pub seed: u64,
}

/// Sub-directories a bundle may contain.
pub const BUNDLE_COMPONENTS: [&str; 2] = ["acoustic", "duration"];

#[derive(Serialize, Deserialize)]
struct Manifest {
    stage: u8,
    config_hash: String,
    run: RunInfo,
    speaker: SpeakerEmbedding,
    centroid: Vec<f64>,
    mel: MelConfig,
}

impl Bundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let parts = [
            (&self.acoustic.params, serde_json::to_value(&self.acoustic.cfg)?),
            (&self.duration.params, serde_json::to_value(&self.duration.cfg)?),
        ];
        for (name, (params, model)) in BUNDLE_COMPONENTS.into_iter().zip(parts) {
            Checkpoint {
                meta: CheckpointMeta {
                    component: name.into(),
                    stage: self.stage,
                    step: 0,
                    stage_step: 0,
                    config_hash: self.config_hash.clone(),
                    vae_frozen: false,
                    clip_norm: 0.0,
                    model,
                    adam_t: 0,
                },
                params: params.clone(),
                optim: None,
            }
            .save(&dir.join(name))?;
        }
        self.vocab.save(&dir.join("vocab.json"))?;
        let manifest = Manifest {
            stage: self.stage,
            config_hash: self.config_hash.clone(),
            run: self.run.clone(),
            speaker: self.speaker.clone(),
            centroid: self.centroid.clone(),
            mel: self.mel.clone(),
        };
        let path = dir.join("bundle.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("bundle.json");
        if !path.is_file() {
            return Err(TtsError::Checkpoint(format!("{} is not a synthesis bundle", dir.display())));
        }
        let m: Manifest = serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?;
        let [a, d] = BUNDLE_COMPONENTS.map(|c| Checkpoint::load(&dir.join(c), &m.config_hash, false));
        let (a, d) = (a?, d?);
        let acfg: AcousticConfig = a.model()?;
        let dcfg: DurationConfig = d.model()?;
        let acoustic = AcousticModel::from_params(acfg, &a.params)?;
        if m.centroid.len() != acoustic.cfg.latent_dim {
            return Err(TtsError::Checkpoint("centroid width differs from the model latent".into()));
        }
        if m.speaker.dim() != acoustic.cfg.speaker_dim {
            return Err(TtsError::Checkpoint("speaker embedding width differs from the model".into()));
        }
        Ok(Self {
            acoustic,
            duration: DurationModel::from_params(dcfg, &d.params)?,
            centroid: m.centroid,
            speaker: m.speaker,
            vocab: Vocabulary::load(&dir.join("vocab.json"))?,
            mel: m.mel,
            stage: m.stage,
            config_hash: m.config_hash,
            run: m.run,
        })
    }
}
