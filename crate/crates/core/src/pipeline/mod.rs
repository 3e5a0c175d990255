//! Four-stage training: voice-conversion augmentation, multi-speaker acoustic
//! and duration training, target-only fine-tuning, and adversarial
//! fine-tuning with a frozen VAE.
//!
//! Every stage writes its checkpoints under `<work_dir>/stage<n>/` and appends
//! JSON-lines metrics to `<work_dir>/stage<n>/metrics.jsonl`. Stages 3 and 4
//! also refresh the synthesis bundle in `<work_dir>/bundle/`.

mod bundle;
mod checkpoint;
mod config;

pub use bundle::{Bundle, RunInfo, BUNDLE_COMPONENTS};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{
    DiscriminatorSection, DurationSection, PipelineConfig, Profile, Sampling, StageBudget, VcSection,
};

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use lrtts_nn::{Graph, Grads, Mat, ParamId};
use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::acoustic::{kl_anneal_weight, l1_graph, loss_train_graph, AcousticConfig, AcousticModel};
use crate::adversarial::{crop_random, inject_generator_loss, loss_generator, Discriminator, DiscriminatorConfig, MelCrop};
use crate::corpus::{
    load_corpus, save_corpus, DurationSequence, SpeakerTable, UtteranceRecord, Vocabulary,
};
use crate::duration::{
    joint_aux_loss_graph, train_duration_model, DurationConfig, DurationMode, DurationModel, DurationTrainConfig,
};
use crate::error::{IoContext, Result, TtsError};
use crate::optim::{adam_step, clip_grad_norm, AdamState};
use crate::vc::{augment_corpus, vc_train, VcConfig, VcTrainConfig};

/// Which records a stage may train on.
#[derive(Clone, Debug, PartialEq)]
pub struct DataFilter {
    /// `None` admits every speaker.
    pub speakers: Option<Vec<String>>,
    pub include_synthetic: bool,
}

impl DataFilter {
    pub fn all() -> Self {
        Self { speakers: None, include_synthetic: true }
    }

    pub fn target_ground_truth(target: &str) -> Self {
        Self {
            speakers: Some(vec![target.to_string()]),
            include_synthetic: false,
        }
    }

    pub fn admits(&self, r: &UtteranceRecord) -> bool {
        (self.include_synthetic || !r.synthetic)
            && self.speakers.as_ref().is_none_or(|s| s.contains(&r.speaker_id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// `L1 + γ·KL`.
    Reconstruction,
    /// `L1 + α·L_G` against a conditional discriminator.
    Adversarial { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPlan {
    pub stage: u8,
    pub filter: DataFilter,
    pub budget: StageBudget,
    pub objective: Objective,
    pub freeze_vae: bool,
    pub sampling: Sampling,
}

impl TrainingPlan {
    /// Acoustic plan for stages 2 to 4.
    pub fn for_stage(stage: u8, cfg: &PipelineConfig) -> Result<Self> {
        let target = cfg.target_speaker.as_str();
        let plan = match stage {
            2 => Self {
                stage,
                filter: DataFilter::all(),
                budget: cfg.stage2.clone(),
                objective: Objective::Reconstruction,
                freeze_vae: false,
                sampling: cfg.sampling,
            },
            3 => Self {
                stage,
                filter: DataFilter::target_ground_truth(target),
                budget: cfg.stage3.clone(),
                objective: Objective::Reconstruction,
                freeze_vae: false,
                sampling: Sampling::Proportional,
            },
            4 => Self {
                stage,
                filter: DataFilter::target_ground_truth(target),
                budget: cfg.stage4.clone(),
                objective: Objective::Adversarial { alpha: cfg.alpha },
                freeze_vae: true,
                sampling: Sampling::Proportional,
            },
            other => return Err(TtsError::Config(format!("no acoustic plan for stage {other}"))),
        };
        plan.validate(target)?;
        Ok(plan)
    }

    /// Fine-tuning stages see target ground truth only; stage 4 keeps the VAE
    /// fixed.
    pub fn validate(&self, target: &str) -> Result<()> {
        if self.stage >= 3 && self.filter != DataFilter::target_ground_truth(target) {
            return Err(TtsError::Config(format!(
                "stage {} must train on ground-truth {target} recordings only",
                self.stage
            )));
        }
        if self.stage == 4 && !self.freeze_vae {
            return Err(TtsError::Config("stage 4 requires a frozen VAE".into()));
        }
        if self.budget.batch_size == 0 {
            return Err(TtsError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One record drawn into a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledRecord {
    pub stage: u8,
    pub step: u64,
    pub id: String,
    pub speaker: String,
    pub synthetic: bool,
}

/// Observation hooks for tests and diagnostics.
pub trait Audit {
    fn sampled(&mut self, _record: &SampledRecord) {}
    /// Durations handed to the upsampler while training on `record`.
    fn upsampled(&mut self, _record: &UtteranceRecord, _durations: &DurationSequence) {}
}

pub struct NoAudit;

impl Audit for NoAudit {}

#[derive(Clone, Debug, Default)]
pub struct RecordingAudit {
    pub sampled: Vec<SampledRecord>,
    pub upsampled: usize,
    /// Upsampler calls whose durations equalled the record's ground truth.
    pub teacher_forced: usize,
}

impl Audit for RecordingAudit {
    fn sampled(&mut self, record: &SampledRecord) {
        self.sampled.push(record.clone());
    }

    fn upsampled(&mut self, record: &UtteranceRecord, durations: &DurationSequence) {
        self.upsampled += 1;
        if *durations == record.durations {
            self.teacher_forced += 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub stage: u8,
    pub l1: Option<f64>,
    pub dkl: Option<f64>,
    pub gamma: Option<f64>,
    pub lg: Option<f64>,
    pub ld: Option<f64>,
    pub lr: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let f = File::open(path).at(path)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| TtsError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

struct MetricsLog {
    path: PathBuf,
    file: File,
}

impl MetricsLog {
    fn open(path: PathBuf, fresh: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).at(dir)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&path)
            .at(&path)?;
        Ok(Self { path, file })
    }

    fn push(&mut self, row: &MetricRow) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(row)?).at(&self.path)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Reuse checkpoints written under a different config.
    pub force: bool,
    /// Stop (and checkpoint) after this many in-stage updates.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub stage: u8,
    /// Updates performed by this call.
    pub steps_run: u64,
    pub stage_step: u64,
    pub global_step: u64,
    pub complete: bool,
    pub metrics: Vec<MetricRow>,
}

/// Ground-truth corpus, vocabulary and speaker table named by `cfg`.
pub struct Inputs {
    pub vocab: Vocabulary,
    pub speakers: SpeakerTable,
    pub records: Vec<UtteranceRecord>,
}

pub fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    let vocab = match &cfg.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::arpabet(),
    };
    let speakers = SpeakerTable::load(&cfg.speakers)?;
    let records = load_corpus(&cfg.manifest, &vocab, &cfg.mel)?;
    for r in &records {
        speakers.get(&r.speaker_id)?;
    }
    speakers.get(&cfg.target_speaker)?;
    Ok(Inputs { vocab, speakers, records })
}

const COMPONENT_VC: &str = "vc";
const COMPONENT_ACOUSTIC: &str = "acoustic";
const COMPONENT_DURATION: &str = "duration";
const COMPONENT_DISCRIMINATOR: &str = "discriminator";

fn augmented_manifest(cfg: &PipelineConfig) -> PathBuf {
    cfg.stage_dir(1).join("augmented").join("manifest.jsonl")
}

fn budget(cfg: &PipelineConfig, stage: u8) -> u64 {
    match stage {
        2 => cfg.stage2.steps,
        3 => cfg.stage3.steps,
        4 => cfg.stage4.steps,
        _ => 0,
    }
}

/// Whether `stage` has finished under the current config.
pub fn stage_complete(cfg: &PipelineConfig, stage: u8) -> bool {
    if stage == 1 {
        return Checkpoint::exists(&cfg.stage_dir(1).join(COMPONENT_VC)) && augmented_manifest(cfg).is_file();
    }
    let dir = cfg.stage_dir(stage);
    let Ok(text) = fs::read_to_string(dir.join(COMPONENT_ACOUSTIC).join("meta.json")) else {
        return false;
    };
    let Ok(meta) = serde_json::from_str::<CheckpointMeta>(&text) else {
        return false;
    };
    meta.stage_step >= budget(cfg, stage) && Checkpoint::exists(&dir.join(COMPONENT_DURATION))
}

fn require_previous(cfg: &PipelineConfig, stage: u8) -> Result<()> {
    if stage > 1 && !stage_complete(cfg, stage - 1) {
        return Err(TtsError::Checkpoint(format!(
            "stage {stage} needs a finished stage {} under {}; run stage {} first",
            stage - 1,
            cfg.work_dir.display(),
            stage - 1
        )));
    }
    Ok(())
}

/// Runs one stage, resuming from its own checkpoint when one exists.
pub fn run_stage(stage: u8, cfg: &PipelineConfig, opts: &RunOptions, audit: &mut dyn Audit) -> Result<StageOutcome> {
    cfg.validate()?;
    require_previous(cfg, stage)?;
    tracing::info!(stage, work_dir = %cfg.work_dir.display(), "running stage");
    match stage {
        1 => run_stage1(cfg, opts, audit),
        2..=4 => run_acoustic_stage(stage, cfg, opts, audit),
        other => Err(TtsError::Config(format!("stage must be 1-4, got {other}"))),
    }
}

/// Runs `stages` in order, stopping at the first error.
pub fn run_stages(
    stages: impl IntoIterator<Item = u8>,
    cfg: &PipelineConfig,
    opts: &RunOptions,
    audit: &mut dyn Audit,
) -> Result<Vec<StageOutcome>> {
    stages.into_iter().map(|s| run_stage(s, cfg, opts, audit)).collect()
}

fn supporting_speakers(cfg: &PipelineConfig, records: &[UtteranceRecord]) -> Vec<String> {
    if let Some(s) = &cfg.vc.source_speaker {
        return vec![s.clone()];
    }
    let mut ids: Vec<String> = records
        .iter()
        .filter(|r| r.speaker_id != cfg.target_speaker)
        .map(|r| r.speaker_id.clone())
        .collect();
    ids.sort();
    ids.dedup();
    ids
}

fn run_stage1(cfg: &PipelineConfig, opts: &RunOptions, audit: &mut dyn Audit) -> Result<StageOutcome> {
    let hash = cfg.hash();
    let dir = cfg.stage_dir(1);
    let vc_dir = dir.join(COMPONENT_VC);
    if stage_complete(cfg, 1) {
        let ck = Checkpoint::load(&vc_dir, &hash, opts.force)?;
        return Ok(StageOutcome {
            stage: 1,
            steps_run: 0,
            stage_step: ck.meta.stage_step,
            global_step: ck.meta.step,
            complete: true,
            metrics: Vec::new(),
        });
    }
    let inputs = load_inputs(cfg)?;
    let ground_truth: Vec<UtteranceRecord> = inputs.records.iter().filter(|r| !r.synthetic).cloned().collect();
    let target_vec = inputs.speakers.get(&cfg.target_speaker)?.vector.clone();
    let model_cfg = cfg.vc_config(inputs.vocab.len(), cfg.mel.n_mels, inputs.speakers.dim());
    let train = VcTrainConfig {
        multi_speaker_steps: cfg.vc.multi_speaker_steps,
        target_epochs: cfg.vc.target_epochs,
        batch_size: cfg.vc.batch_size,
        seed: cfg.seed,
        lr: cfg.lr.clone(),
        adam: cfg.adam.clone(),
        clip_norm: cfg.clip_norm,
    };
    let (model, log) = vc_train(&ground_truth, &inputs.speakers, &cfg.target_speaker, model_cfg.clone(), &train)?;

    let n_target = ground_truth.iter().filter(|r| r.speaker_id == cfg.target_speaker).count();
    let per_batch = cfg.vc.batch_size.min(n_target).max(1);
    for (i, id) in log.phase_two_ids.iter().enumerate() {
        audit.sampled(&SampledRecord {
            stage: 1,
            step: (log.phase_one_steps + i / per_batch + 1) as u64,
            id: id.clone(),
            speaker: cfg.target_speaker.clone(),
            synthetic: false,
        });
    }

    let mut metrics = MetricsLog::open(dir.join("metrics.jsonl"), true)?;
    let mut rows = Vec::with_capacity(log.losses.len());
    for (i, &l1) in log.losses.iter().enumerate() {
        let row = MetricRow {
            step: i as u64 + 1,
            stage: 1,
            l1: Some(l1),
            dkl: None,
            gamma: None,
            lg: None,
            ld: None,
            lr: train.lr.lr(i as u64),
        };
        metrics.push(&row)?;
        rows.push(row);
    }

    let mut augmented = Vec::new();
    for source in supporting_speakers(cfg, &ground_truth) {
        if source == cfg.target_speaker {
            return Err(TtsError::Config("augmentation source must differ from the target".into()));
        }
        let sources: Vec<UtteranceRecord> = ground_truth.iter().filter(|r| r.speaker_id == source).cloned().collect();
        if sources.is_empty() {
            return Err(TtsError::UnknownSpeaker(source));
        }
        augmented.extend(augment_corpus(&model, &sources, &cfg.target_speaker, &target_vec)?);
    }
    save_corpus(&dir.join("augmented"), &augmented, &inputs.vocab)?;

    let steps = log.losses.len() as u64;
    Checkpoint {
        meta: CheckpointMeta {
            component: COMPONENT_VC.into(),
            stage: 1,
            step: steps,
            stage_step: steps,
            config_hash: hash,
            vae_frozen: false,
            clip_norm: cfg.clip_norm,
            model: serde_json::to_value(&model_cfg)?,
            adam_t: steps,
        },
        params: model.params,
        optim: None,
    }
    .save(&vc_dir)?;
    tracing::info!(synthetic = augmented.len(), steps, "stage 1 done");
    Ok(StageOutcome {
        stage: 1,
        steps_run: steps,
        stage_step: steps,
        global_step: steps,
        complete: true,
        metrics: rows,
    })
}

/// Loads the stage-1 VC model (for `vc augment` and inspection).
pub fn load_vc(cfg: &PipelineConfig, force: bool) -> Result<crate::vc::VcModel> {
    let ck = Checkpoint::load(&cfg.stage_dir(1).join(COMPONENT_VC), &cfg.hash(), force)?;
    let model_cfg: VcConfig = ck.model()?;
    crate::vc::VcModel::from_params(model_cfg, &ck.params)
}

fn stage_data(cfg: &PipelineConfig, inputs: &Inputs, plan: &TrainingPlan) -> Result<Vec<UtteranceRecord>> {
    let mut all: Vec<UtteranceRecord> = inputs.records.iter().filter(|r| !r.synthetic).cloned().collect();
    if plan.filter.include_synthetic {
        let mut synthetic = load_corpus(&augmented_manifest(cfg), &inputs.vocab, &cfg.mel)?;
        for r in &mut synthetic {
            r.synthetic = true;
        }
        all.extend(synthetic);
    }
    let data: Vec<UtteranceRecord> = all.into_iter().filter(|r| plan.filter.admits(r)).collect();
    if data.is_empty() {
        return Err(TtsError::Validation(format!("stage {} has no training records", plan.stage)));
    }
    Ok(data)
}

fn load_acoustic(dir: &Path, hash: &str, force: bool) -> Result<(AcousticModel, AdamState, CheckpointMeta)> {
    let ck = Checkpoint::load(dir, hash, force)?;
    let cfg: AcousticConfig = ck.model()?;
    let model = AcousticModel::from_params(cfg, &ck.params)?;
    let adam_cfg = crate::optim::AdamConfig::default();
    let adam = match &ck.optim {
        Some(o) => AdamState::from_store(adam_cfg, ck.meta.adam_t, &model.params, o)?,
        None => AdamState::new(adam_cfg, &model.params),
    };
    Ok((model, adam, ck.meta))
}

fn load_duration(dir: &Path, hash: &str, force: bool) -> Result<(DurationModel, AdamState, CheckpointMeta)> {
    let ck = Checkpoint::load(dir, hash, force)?;
    let cfg: DurationConfig = ck.model()?;
    let model = DurationModel::from_params(cfg, &ck.params)?;
    let adam_cfg = crate::optim::AdamConfig::default();
    let adam = match &ck.optim {
        Some(o) => AdamState::from_store(adam_cfg, ck.meta.adam_t, &model.params, o)?,
        None => AdamState::new(adam_cfg, &model.params),
    };
    Ok((model, adam, ck.meta))
}

#[allow(clippy::too_many_arguments)]
fn save_component(
    dir: &Path,
    component: &str,
    stage: u8,
    step: u64,
    stage_step: u64,
    cfg: &PipelineConfig,
    vae_frozen: bool,
    model: serde_json::Value,
    params: &lrtts_nn::ParamStore,
    adam: Option<&AdamState>,
) -> Result<()> {
    Checkpoint {
        meta: CheckpointMeta {
            component: component.into(),
            stage,
            step,
            stage_step,
            config_hash: cfg.hash(),
            vae_frozen,
            clip_norm: cfg.clip_norm,
            model,
            adam_t: adam.map_or(0, |a| a.t),
        },
        params: params.clone(),
        optim: adam.map(|a| a.to_store(params)),
    }
    .save(&dir.join(component))
}

fn run_acoustic_stage(stage: u8, cfg: &PipelineConfig, opts: &RunOptions, audit: &mut dyn Audit) -> Result<StageOutcome> {
    let hash = cfg.hash();
    let plan = TrainingPlan::for_stage(stage, cfg)?;
    let dir = cfg.stage_dir(stage);
    let prev = cfg.stage_dir(stage - 1);
    if stage > 2 {
        // Hash guard on the checkpoint being built upon.
        Checkpoint::load(&prev.join(COMPONENT_ACOUSTIC), &hash, opts.force)?;
    } else {
        Checkpoint::load(&prev.join(COMPONENT_VC), &hash, opts.force)?;
    }
    let inputs = load_inputs(cfg)?;
    let data = stage_data(cfg, &inputs, &plan)?;
    let joint = cfg.duration.mode == DurationMode::Joint;

    let resuming = Checkpoint::exists(&dir.join(COMPONENT_ACOUSTIC));
    let (mut model, mut adam, start_global, done) = if resuming {
        let (m, a, meta) = load_acoustic(&dir.join(COMPONENT_ACOUSTIC), &hash, opts.force)?;
        (m, a, meta.step - meta.stage_step, meta.stage_step)
    } else if stage == 2 {
        let acfg = cfg.acoustic_config(inputs.vocab.len(), cfg.mel.n_mels, inputs.speakers.dim());
        let m = AcousticModel::new(acfg, cfg.seed)?;
        let a = AdamState::new(cfg.adam.clone(), &m.params);
        (m, a, 0, 0)
    } else {
        let (m, a, meta) = load_acoustic(&prev.join(COMPONENT_ACOUSTIC), &hash, opts.force)?;
        (m, a, meta.step, 0)
    };
    adam.cfg = cfg.adam.clone();

    // Joint heads train with the acoustic model in stages 2 and 3.
    let joint_train = joint && plan.objective == Objective::Reconstruction;
    let mut duration: Option<(DurationModel, AdamState)> = None;
    if joint {
        let own = dir.join(COMPONENT_DURATION);
        duration = Some(if resuming && Checkpoint::exists(&own) {
            let (m, a, _) = load_duration(&own, &hash, opts.force)?;
            (m, a)
        } else if stage == 2 {
            let dcfg = cfg.duration_config(inputs.vocab.len(), inputs.speakers.dim(), &model.cfg);
            let m = DurationModel::new(dcfg, cfg.seed.wrapping_add(1))?;
            let a = AdamState::new(cfg.adam.clone(), &m.params);
            (m, a)
        } else {
            let (m, a, _) = load_duration(&prev.join(COMPONENT_DURATION), &hash, opts.force)?;
            (m, a)
        });
    }

    let mut disc: Option<(Discriminator, AdamState)> = None;
    if let Objective::Adversarial { alpha } = plan.objective {
        tracing::info!(alpha, "adversarial fine-tuning");
        let own = dir.join(COMPONENT_DISCRIMINATOR);
        disc = Some(if resuming && Checkpoint::exists(&own) {
            let ck = Checkpoint::load(&own, &hash, opts.force)?;
            let dcfg: DiscriminatorConfig = ck.model()?;
            let d = Discriminator::from_params(dcfg, &ck.params)?;
            let a = match &ck.optim {
                Some(o) => AdamState::from_store(cfg.adam.clone(), ck.meta.adam_t, &d.params, o)?,
                None => d.new_optimizer(),
            };
            (d, a)
        } else {
            let d = Discriminator::new(cfg.discriminator_config(&model.cfg), cfg.seed.wrapping_add(2))?;
            let a = AdamState::new(cfg.adam.clone(), &d.params);
            (d, a)
        });
    }

    let total = plan.budget.steps;
    let stop = opts.stop_after.map_or(total, |s| (done + s).min(total));
    let mut metrics = MetricsLog::open(dir.join("metrics.jsonl"), !resuming)?;
    let batches = plan_batches(&data, &plan, total, cfg.seed);
    let frozen: HashSet<ParamId> = if plan.freeze_vae { model.vae_param_ids().into_iter().collect() } else { HashSet::new() };
    let vae_before = model.params.checksum_of(frozen.iter().copied());

    let mut rows = Vec::new();
    for s in done..stop {
        let global = start_global + s + 1;
        let mut ctx = StepCtx {
            cfg,
            plan: &plan,
            speakers: &inputs.speakers,
            frozen: &frozen,
            joint: if joint_train { duration.as_mut().map(|(m, a)| (m, a)) } else { None },
            disc: disc.as_mut().map(|(d, a)| (d, a)),
        };
        let batch: Vec<&UtteranceRecord> = batches[s as usize].iter().map(|&i| &data[i]).collect();
        let row = train_step(&mut ctx, &mut model, &mut adam, &batch, global, audit)?;
        metrics.push(&row)?;
        rows.push(row);
    }
    if plan.freeze_vae && model.params.checksum_of(frozen.iter().copied()) != vae_before {
        return Err(TtsError::Validation("VAE parameters changed while frozen".into()));
    }

    let global = start_global + stop;
    let model_json = serde_json::to_value(&model.cfg)?;
    save_component(&dir, COMPONENT_ACOUSTIC, stage, global, stop, cfg, plan.freeze_vae, model_json, &model.params, Some(&adam))?;
    if let Some((d, a)) = &disc {
        save_component(&dir, COMPONENT_DISCRIMINATOR, stage, global, stop, cfg, false, serde_json::to_value(&d.cfg)?, &d.params, Some(a))?;
    }
    let complete = stop >= total;
    if let Some((m, a)) = &duration {
        save_component(&dir, COMPONENT_DURATION, stage, global, stop, cfg, false, serde_json::to_value(&m.cfg)?, &m.params, Some(a))?;
    } else if complete {
        finish_separate_duration(stage, cfg, &inputs, &data, opts)?;
    }
    if complete && stage >= 3 {
        write_bundle(stage, cfg, &inputs, &model, opts)?;
    }
    Ok(StageOutcome {
        stage,
        steps_run: stop - done,
        stage_step: stop,
        global_step: global,
        complete,
        metrics: rows,
    })
}

/// Separate mode: stage 2 trains the duration model on the stage-2 data;
/// later stages carry it forward unchanged.
fn finish_separate_duration(
    stage: u8,
    cfg: &PipelineConfig,
    inputs: &Inputs,
    data: &[UtteranceRecord],
    opts: &RunOptions,
) -> Result<()> {
    let dir = cfg.stage_dir(stage);
    let hash = cfg.hash();
    if stage == 2 {
        let dcfg = cfg.duration_config(inputs.vocab.len(), inputs.speakers.dim(), &cfg.acoustic_config(inputs.vocab.len(), cfg.mel.n_mels, inputs.speakers.dim()));
        let train = DurationTrainConfig {
            steps: cfg.duration.steps,
            batch_size: cfg.duration.batch_size,
            seed: cfg.seed,
            lr: cfg.lr.clone(),
            adam: cfg.adam.clone(),
            clip_norm: cfg.clip_norm,
        };
        let (m, log) = train_duration_model(data, &inputs.speakers, dcfg, &train)?;
        tracing::info!(final_loss = log.losses.last().copied().unwrap_or(f64::NAN), "duration model trained");
        let steps = log.losses.len() as u64;
        save_component(&dir, COMPONENT_DURATION, stage, steps, steps, cfg, false, serde_json::to_value(&m.cfg)?, &m.params, None)
    } else {
        let ck = Checkpoint::load(&cfg.stage_dir(stage - 1).join(COMPONENT_DURATION), &hash, opts.force)?;
        let mut meta = ck.meta.clone();
        meta.stage = stage;
        meta.config_hash = hash;
        Checkpoint { meta, ..ck }.save(&dir.join(COMPONENT_DURATION))
    }
}

fn write_bundle(stage: u8, cfg: &PipelineConfig, inputs: &Inputs, model: &AcousticModel, opts: &RunOptions) -> Result<()> {
    let (duration, _, _) = load_duration(&cfg.stage_dir(stage).join(COMPONENT_DURATION), &cfg.hash(), opts.force)?;
    let centroid = model.centroid(&inputs.records, &cfg.target_speaker)?;
    let acoustic = AcousticModel::from_params(model.cfg.clone(), &model.params)?;
    Bundle {
        acoustic,
        duration,
        centroid,
        speaker: inputs.speakers.get(&cfg.target_speaker)?.clone(),
        vocab: inputs.vocab.clone(),
        mel: cfg.mel.clone(),
        stage,
        config_hash: cfg.hash(),
        run: RunInfo {
            alpha: cfg.alpha,
            gamma_max: cfg.kl.gamma_max,
            seed: cfg.seed,
        },
    }
    .save(&cfg.bundle_dir())
}

/// Batch index lists for the whole stage, fixed by the seed.
fn plan_batches(data: &[UtteranceRecord], plan: &TrainingPlan, steps: u64, seed: u64) -> Vec<Vec<usize>> {
    let stage_seed = mix(&[seed, plan.stage as u64, 0xba7c]);
    match plan.sampling {
        Sampling::Proportional => {
            crate::duration::batch_indices(data.len(), plan.budget.batch_size, steps, stage_seed)
        }
        Sampling::Balanced => {
            let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, r) in data.iter().enumerate() {
                by_speaker.entry(&r.speaker_id).or_default().push(i);
            }
            let groups: Vec<&Vec<usize>> = by_speaker.values().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(stage_seed);
            (0..steps)
                .map(|_| {
                    (0..plan.budget.batch_size)
                        .map(|_| *groups.choose(&mut rng).and_then(|g| g.choose(&mut rng)).expect("non-empty"))
                        .collect()
                })
                .collect()
        }
    }
}

/// SplitMix64 over the parts; used to derive per-step seeds.
pub(crate) fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

struct StepCtx<'a> {
    cfg: &'a PipelineConfig,
    plan: &'a TrainingPlan,
    speakers: &'a SpeakerTable,
    frozen: &'a HashSet<ParamId>,
    joint: Option<(&'a mut DurationModel, &'a mut AdamState)>,
    disc: Option<(&'a mut Discriminator, &'a mut AdamState)>,
}

fn row_vec(v: &[f64]) -> Mat {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

/// One optimizer update over `batch`; returns the logged metrics.
fn train_step(
    ctx: &mut StepCtx,
    model: &mut AcousticModel,
    adam: &mut AdamState,
    batch: &[&UtteranceRecord],
    global: u64,
    audit: &mut dyn Audit,
) -> Result<MetricRow> {
    let cfg = ctx.cfg;
    let stage = ctx.plan.stage;
    let lr = cfg.lr.lr(global - 1);
    let gamma = kl_anneal_weight(global - 1, &cfg.kl);
    let latent = model.cfg.latent_dim;
    let mut grads = Grads::zeros_like(&model.params);
    let mut dur_grads = ctx.joint.as_ref().map(|(m, _)| Grads::zeros_like(&m.params));
    let (mut l1_sum, mut kl_sum) = (0.0, 0.0);
    let (mut real_crops, mut fake_crops): (Vec<MelCrop>, Vec<MelCrop>) = (Vec::new(), Vec::new());

    for (k, r) in batch.iter().enumerate() {
        audit.sampled(&SampledRecord {
            stage,
            step: global,
            id: r.id.clone(),
            speaker: r.speaker_id.clone(),
            synthetic: r.synthetic,
        });
        let spk = &ctx.speakers.get(&r.speaker_id)?.vector;
        let seed = mix(&[cfg.seed, stage as u64, global, k as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f64> = (0..latent).map(|_| StandardNormal.sample(&mut rng)).collect();

        let mut g = Graph::new(&model.params).with_dropout(seed);
        audit.upsampled(r, &r.durations);
        let fwd = model.forward_train(&mut g, r, spk, Some(&eps))?;
        let mut loss = match ctx.plan.objective {
            Objective::Reconstruction => {
                let (total, l1, kl) = loss_train_graph(&mut g, fwd.pred, fwd.target, fwd.mu, fwd.log_sigma, gamma);
                l1_sum += g.scalar(l1);
                kl_sum += g.scalar(kl);
                total
            }
            Objective::Adversarial { .. } => {
                let l1 = l1_graph(&mut g, fwd.pred, fwd.target);
                l1_sum += g.scalar(l1);
                l1
            }
        };
        let z_value: Vec<f64> = {
            let mu = g.value(fwd.mu);
            let ls = g.value(fwd.log_sigma);
            (0..latent).map(|j| mu[[0, j]] + ls[[0, j]].exp() * eps[j]).collect()
        };

        if let Some((dm, _)) = ctx.joint.as_mut() {
            let weight = cfg.duration.aux_weight;
            let x_value = g.value(fwd.x_tilde).clone();
            let mut dg = Graph::new(&dm.params);
            let xc = dg.constant(x_value);
            let zc = dg.constant(row_vec(&z_value));
            let pred = dm.forward_joint(&mut dg, xc, zc)?;
            let aux = joint_aux_loss_graph(&mut dg, pred, &r.durations, weight)?;
            let back = dg.backward(aux);
            if let Some(acc) = dur_grads.as_mut() {
                acc.accumulate(back.param_grads());
            }
            // Route the auxiliary gradient into x̃ and z of the acoustic graph.
            let gx = back.wrt(xc).cloned().unwrap_or_else(|| Mat::zeros(g.shape(fwd.x_tilde)));
            let gz = back.wrt(zc).cloned().unwrap_or_else(|| Mat::zeros((1, latent)));
            let sx = g.constant(gx);
            let ix = g.mul(fwd.x_tilde, sx);
            let ix = g.sum(ix);
            let e = g.constant(row_vec(&eps));
            let sigma = g.exp(fwd.log_sigma);
            let noise = g.mul(sigma, e);
            let z = g.add(fwd.mu, noise);
            let sz = g.constant(gz);
            let iz = g.mul(z, sz);
            let iz = g.sum(iz);
            loss = g.add(loss, ix);
            loss = g.add(loss, iz);
        }

        if let (Some((d, _)), Objective::Adversarial { alpha }) = (ctx.disc.as_ref(), ctx.plan.objective) {
            let x_frames = g.value(fwd.x_tilde).select(ndarray::Axis(0), &r.durations.frame_to_phoneme());
            if let Some(real) = crop_random(r.mel.data(), &x_frames, &z_value, &mut rng)? {
                let (inj, fake) = inject_generator_loss(&mut g, fwd.pred, &real, d, alpha)?;
                loss = g.add(loss, inj);
                real_crops.push(real);
                fake_crops.push(fake);
            }
        }

        let back = g.backward(loss);
        grads.accumulate(back.param_grads());
    }

    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    for &id in ctx.frozen {
        grads.remove(id);
    }
    clip_grad_norm(&mut grads, cfg.clip_norm);
    adam_step(&mut model.params, &grads, adam, lr, ctx.frozen)?;

    if let (Some((dm, da)), Some(mut dg)) = (ctx.joint.as_mut(), dur_grads) {
        dg.scale(1.0 / n);
        clip_grad_norm(&mut dg, cfg.clip_norm);
        adam_step(&mut dm.params, &dg, da, lr, &HashSet::new())?;
    }

    let (mut lg, mut ld) = (None, None);
    if let Some((d, da)) = ctx.disc.as_mut() {
        if !real_crops.is_empty() {
            let real_scores = d.discriminate_batch(&real_crops)?;
            let fake_scores = d.discriminate_batch(&fake_crops)?;
            lg = Some(loss_generator(&real_scores, &fake_scores));
            ld = Some(d.train_step(da, &real_crops, &fake_crops, cfg.discriminator.lr)?);
        } else {
            lg = Some(0.0);
            ld = Some(0.0);
        }
    }

    let reconstruction = ctx.plan.objective == Objective::Reconstruction;
    Ok(MetricRow {
        step: global,
        stage,
        l1: Some(l1_sum / n),
        dkl: reconstruction.then_some(kl_sum / n),
        gamma: reconstruction.then_some(gamma),
        lg,
        ld,
        lr,
    })
}
