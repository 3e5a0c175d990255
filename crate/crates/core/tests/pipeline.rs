use std::path::Path;

use lrtts::corpus::toy::{generate, ToyConfig};
use lrtts::pipeline::{
    read_metrics, run_stage, run_stages, Bundle, Checkpoint, NoAudit, PipelineConfig, Profile, RecordingAudit,
    RunOptions,
};
use lrtts::TtsError;
use serde_json::json;

fn toy() -> ToyConfig {
    ToyConfig {
        n_speakers: 2,
        target_utterances: 4,
        support_utterances: 3,
        min_phonemes: 7,
        max_phonemes: 8,
        min_duration: 8,
        max_duration: 9,
        ..ToyConfig::default()
    }
}

fn setup(root: &Path, extra: serde_json::Value) -> PipelineConfig {
    let corpus = generate(&toy()).unwrap();
    corpus.write(&root.join("corpus")).unwrap();
    let mut overrides = json!({
        "manifest": root.join("corpus/manifest.jsonl"),
        "speakers": root.join("corpus/speakers.json"),
        "vocab": root.join("corpus/vocab.json"),
        "work_dir": root.join("run"),
        "acoustic_hidden": 16,
        "stage2": {"steps": 4, "batch_size": 3},
        "stage3": {"steps": 3, "batch_size": 2},
        "stage4": {"steps": 2, "batch_size": 2},
        "vc": {"hidden": 16, "multi_speaker_steps": 3, "target_epochs": 1, "batch_size": 2},
        "duration": {"hidden": 8, "steps": 3, "batch_size": 4},
        "discriminator": {"channels": [8, 8, 8, 8], "cond_channels": 4}
    });
    merge(&mut overrides, extra);
    PipelineConfig::with_overrides(Profile::Desk, &overrides).unwrap()
}

fn merge(a: &mut serde_json::Value, b: serde_json::Value) {
    if let (Some(a), serde_json::Value::Object(b)) = (a.as_object_mut(), b) {
        for (k, v) in b {
            a.insert(k, v);
        }
    }
}

fn checksum(dir: &Path) -> String {
    Checkpoint::load(dir, "", true).unwrap().params.checksum()
}

#[test]
fn four_stages_produce_a_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), json!({}));
    let mut audit = RecordingAudit::default();
    let outcomes = run_stages(1..=4, &cfg, &RunOptions::default(), &mut audit).unwrap();
    assert!(outcomes.iter().all(|o| o.complete));

    // Stage 3 and 4 draw only target ground truth.
    for s in audit.sampled.iter().filter(|s| s.stage >= 3) {
        assert_eq!(s.speaker, "spk0");
        assert!(!s.synthetic, "{}", s.id);
    }
    assert!(audit.sampled.iter().any(|s| s.stage == 2 && s.synthetic));
    assert_eq!(audit.upsampled, audit.teacher_forced);
    assert!(audit.upsampled > 0);

    // Global step numbering continues across stages.
    let m3 = read_metrics(&cfg.stage_dir(3).join("metrics.jsonl")).unwrap();
    assert_eq!(m3.iter().map(|r| r.step).collect::<Vec<_>>(), vec![5, 6, 7]);
    let m4 = read_metrics(&cfg.stage_dir(4).join("metrics.jsonl")).unwrap();
    assert!(m4.iter().all(|r| r.lg.is_some() && r.ld.is_some() && r.dkl.is_none()));

    let s3 = Checkpoint::load(&cfg.stage_dir(3).join("acoustic"), &cfg.hash(), false).unwrap();
    let s4 = Checkpoint::load(&cfg.stage_dir(4).join("acoustic"), &cfg.hash(), false).unwrap();
    assert!(s4.meta.vae_frozen);
    let vae = |c: &Checkpoint| c.params.checksum_of(c.params.ids_with_prefix("vae.").collect::<Vec<_>>());
    assert_eq!(vae(&s3), vae(&s4));
    assert_ne!(s3.params.checksum(), s4.params.checksum());

    let bundle = Bundle::load(&cfg.bundle_dir()).unwrap();
    assert_eq!(bundle.stage, 4);
    assert!(!cfg.bundle_dir().join("discriminator").exists());
    assert_eq!(bundle.centroid.len(), bundle.acoustic.cfg.latent_dim);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = setup(a.path(), json!({}));
    let cb = setup(b.path(), json!({}));
    run_stage(1, &ca, &RunOptions::default(), &mut NoAudit).unwrap();
    run_stage(1, &cb, &RunOptions::default(), &mut NoAudit).unwrap();

    run_stage(2, &ca, &RunOptions::default(), &mut NoAudit).unwrap();
    let first = run_stage(2, &cb, &RunOptions { stop_after: Some(2), ..Default::default() }, &mut NoAudit).unwrap();
    assert!(!first.complete);
    let second = run_stage(2, &cb, &RunOptions::default(), &mut NoAudit).unwrap();
    assert_eq!(second.metrics.first().unwrap().step, 3);
    assert!(second.complete);

    let steps: Vec<u64> = read_metrics(&cb.stage_dir(2).join("metrics.jsonl")).unwrap().iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);
    assert_eq!(checksum(&ca.stage_dir(2).join("acoustic")), checksum(&cb.stage_dir(2).join("acoustic")));
}

#[test]
fn config_change_blocks_reuse_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), json!({}));
    run_stage(1, &cfg, &RunOptions::default(), &mut NoAudit).unwrap();
    let changed = PipelineConfig { alpha: 0.5, ..cfg.clone() };
    let err = run_stage(2, &changed, &RunOptions::default(), &mut NoAudit).err().unwrap();
    assert!(matches!(err, TtsError::Checkpoint(_)), "{err}");
    run_stage(2, &changed, &RunOptions { force: true, ..Default::default() }, &mut NoAudit).unwrap();
}

#[test]
fn joint_duration_mode_trains_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), json!({"duration": {"mode": "joint", "hidden": 8, "steps": 3, "batch_size": 4, "aux_weight": 0.025}}));
    run_stages(1..=3, &cfg, &RunOptions::default(), &mut NoAudit).unwrap();
    let bundle = Bundle::load(&cfg.bundle_dir()).unwrap();
    assert_eq!(bundle.duration.cfg.mode, lrtts::duration::DurationMode::Joint);
    let s2 = checksum(&cfg.stage_dir(2).join("duration"));
    let s3 = checksum(&cfg.stage_dir(3).join("duration"));
    assert_ne!(s2, s3);
}
