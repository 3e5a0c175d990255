//! Pipeline configuration: named profiles merged with JSON overrides, and a
//! content hash guarding checkpoint reuse.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::acoustic::{AcousticConfig, KlSchedule};
use crate::adversarial::{DiscriminatorConfig, DEFAULT_ALPHA};
use crate::corpus::MelConfig;
use crate::duration::{DurationConfig, DurationMode, DEFAULT_AUX_WEIGHT};
use crate::error::{IoContext, Result, TtsError};
use crate::optim::{AdamConfig, LrSchedule};
use crate::vc::VcConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = TtsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(TtsError::Config(format!("unknown profile {other:?} (desk or paper)"))),
        }
    }
}

/// Multi-speaker batch composition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Uniform over records, so speakers contribute in proportion to data.
    Proportional,
    /// Uniform over speakers, then over that speaker's records.
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBudget {
    pub steps: u64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VcSection {
    /// `None` keeps the full-size widths.
    pub hidden: Option<usize>,
    pub multi_speaker_steps: u64,
    pub target_epochs: u64,
    pub batch_size: usize,
    /// Supporting speaker converted into synthetic target data; defaults to
    /// the first non-target speaker.
    pub source_speaker: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationSection {
    pub mode: DurationMode,
    pub hidden: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub aux_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSection {
    pub channels: Vec<usize>,
    pub cond_channels: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub seed: u64,
    pub target_speaker: String,
    pub manifest: PathBuf,
    pub speakers: PathBuf,
    /// JSON symbol list; `None` uses the built-in ARPAbet inventory.
    pub vocab: Option<PathBuf>,
    pub work_dir: PathBuf,
    pub mel: MelConfig,
    /// `None` keeps the full-size acoustic widths.
    pub acoustic_hidden: Option<usize>,
    pub dropout: f64,
    pub stage2: StageBudget,
    pub stage3: StageBudget,
    pub stage4: StageBudget,
    pub sampling: Sampling,
    pub lr: LrSchedule,
    pub kl: KlSchedule,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub alpha: f64,
    pub vc: VcSection,
    pub duration: DurationSection,
    pub discriminator: DiscriminatorSection,
}

impl PipelineConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self {
                profile,
                seed: 0,
                target_speaker: "spk0".into(),
                manifest: PathBuf::from("corpus/manifest.jsonl"),
                speakers: PathBuf::from("corpus/speakers.json"),
                vocab: None,
                work_dir: PathBuf::from("runs/desk"),
                mel: MelConfig::default(),
                acoustic_hidden: Some(64),
                dropout: 0.1,
                stage2: StageBudget { steps: 2_000, batch_size: 8 },
                stage3: StageBudget { steps: 500, batch_size: 8 },
                stage4: StageBudget { steps: 500, batch_size: 8 },
                sampling: Sampling::Proportional,
                lr: LrSchedule {
                    base_lr: 1e-3,
                    warmup_steps: 100,
                    decay_end: 20_000,
                    floor: 1e-5,
                },
                kl: KlSchedule::default(),
                adam: AdamConfig::default(),
                clip_norm: 1.0,
                alpha: DEFAULT_ALPHA,
                vc: VcSection {
                    hidden: Some(64),
                    multi_speaker_steps: 500,
                    target_epochs: 32,
                    batch_size: 8,
                    source_speaker: None,
                },
                duration: DurationSection {
                    mode: DurationMode::Separate,
                    hidden: 32,
                    steps: 2_000,
                    batch_size: 32,
                    aux_weight: DEFAULT_AUX_WEIGHT,
                },
                discriminator: DiscriminatorSection {
                    channels: vec![64, 128, 256, 256],
                    cond_channels: 64,
                    lr: 1e-4,
                },
            },
            Profile::Paper => {
                let desk = Self::profile(Profile::Desk);
                Self {
                    profile,
                    work_dir: PathBuf::from("runs/paper"),
                    acoustic_hidden: None,
                    stage2: StageBudget { steps: 500_000, batch_size: 32 },
                    stage3: StageBudget { steps: 30_000, batch_size: 32 },
                    stage4: StageBudget { steps: 30_000, batch_size: 32 },
                    lr: LrSchedule::default(),
                    kl: KlSchedule {
                        start: 10_000,
                        end: 100_000,
                        gamma_max: 1e-2,
                    },
                    vc: VcSection {
                        hidden: None,
                        multi_speaker_steps: 50_000,
                        target_epochs: 320,
                        batch_size: 32,
                        source_speaker: None,
                    },
                    duration: DurationSection {
                        hidden: 256,
                        steps: 150_000,
                        ..desk.duration.clone()
                    },
                    ..desk
                }
            }
        }
    }

    /// Profile defaults with `overrides` merged in (objects merge key by key,
    /// everything else replaces).
    pub fn with_overrides(profile: Profile, overrides: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::profile(profile))?;
        merge(&mut base, overrides);
        if let Some(p) = overrides.get("profile") {
            if p != &serde_json::to_value(profile)? {
                return Err(TtsError::Config(format!("override file names profile {p}, run uses {profile:?}")));
            }
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| TtsError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a JSON override file; relative data paths resolve against it.
    pub fn load(path: &Path, profile: Profile) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let overrides: Value = serde_json::from_str(&text)?;
        let mut cfg = Self::with_overrides(profile, &overrides)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.manifest, &mut cfg.speakers, &mut cfg.work_dir].into_iter().chain(cfg.vocab.as_mut()) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        for (name, b) in [("stage2", &self.stage2), ("stage3", &self.stage3), ("stage4", &self.stage4)] {
            if b.batch_size == 0 {
                return Err(TtsError::Config(format!("{name} batch size must be positive")));
            }
        }
        if self.alpha < 0.0 {
            return Err(TtsError::Config("alpha must be non-negative".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(TtsError::Config("clip norm must be positive".into()));
        }
        if self.lr.decay_end <= self.lr.warmup_steps {
            return Err(TtsError::Config("decay end must follow warm-up".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical (sorted-key) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn acoustic_config(&self, vocab: usize, n_mels: usize, speaker_dim: usize) -> AcousticConfig {
        let mut c = match self.acoustic_hidden {
            Some(h) => AcousticConfig::scaled(vocab, n_mels, speaker_dim, h),
            None => AcousticConfig::paper(vocab, n_mels, speaker_dim),
        };
        c.dropout = self.dropout;
        c
    }

    pub fn vc_config(&self, vocab: usize, n_mels: usize, speaker_dim: usize) -> VcConfig {
        let mut c = VcConfig::new(vocab, n_mels, speaker_dim);
        if let Some(h) = self.vc.hidden {
            c.hidden = h;
            c.phoneme_dim = h.min(c.phoneme_dim);
        }
        c
    }

    pub fn duration_config(&self, vocab: usize, speaker_dim: usize, acoustic: &AcousticConfig) -> DurationConfig {
        match self.duration.mode {
            DurationMode::Separate => {
                let mut c = DurationConfig::separate(vocab, speaker_dim, self.duration.hidden);
                c.dropout = self.dropout;
                c
            }
            DurationMode::Joint => DurationConfig::joint(acoustic.encoder_hidden, acoustic.latent_dim),
        }
    }

    pub fn discriminator_config(&self, acoustic: &AcousticConfig) -> DiscriminatorConfig {
        let mut c = DiscriminatorConfig::new(acoustic.n_mels, acoustic.encoder_hidden, acoustic.latent_dim);
        c.channels = self.discriminator.channels.clone();
        c.cond_channels = self.discriminator.cond_channels;
        c
    }

    pub fn stage_dir(&self, stage: u8) -> PathBuf {
        self.work_dir.join(format!("stage{stage}"))
    }

    pub fn bundle_dir(&self) -> PathBuf {
        self.work_dir.join("bundle")
    }
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn profiles_differ_in_scale() {
        let d = PipelineConfig::profile(Profile::Desk);
        let p = PipelineConfig::profile(Profile::Paper);
        assert_eq!((d.stage2.steps, d.stage2.batch_size), (2_000, 8));
        assert_eq!((d.stage3.steps, d.stage4.steps), (500, 500));
        assert_eq!((p.stage2.steps, p.stage2.batch_size), (500_000, 32));
        assert_eq!((p.stage3.steps, p.stage4.steps), (30_000, 30_000));
        assert_eq!(p.duration.steps, 150_000);
        assert_eq!(d.alpha, 0.1);
        assert_eq!(d.clip_norm, 1.0);
    }

    #[test]
    fn overrides_merge_nested() {
        let c = PipelineConfig::with_overrides(Profile::Desk, &json!({"stage2": {"steps": 7}, "seed": 3})).unwrap();
        assert_eq!(c.stage2.steps, 7);
        assert_eq!(c.stage2.batch_size, 8);
        assert_eq!(c.seed, 3);
        assert!(PipelineConfig::with_overrides(Profile::Desk, &json!({"stage2": {"steps": "x"}})).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::profile(Profile::Desk);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.alpha = 0.2;
        assert_ne!(a.hash(), b.hash());
    }
}
