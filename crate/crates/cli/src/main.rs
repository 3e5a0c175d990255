use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lrtts::corpus::mel::{read_feature_cache, write_feature_cache};
use lrtts::corpus::toy::{self, ToyConfig};
use lrtts::corpus::{extract_mel, save_corpus, DurationSequence, MelConfig, MelSpectrogram, Waveform};
use lrtts::duration::{predict_durations, predict_durations_joint, train_duration_model, DurationMode, DurationTrainConfig};
use lrtts::pipeline::{self, Bundle, NoAudit, PipelineConfig, Profile, RunOptions};
use lrtts::synth::{emit_report, gap_closure, mel_invert, synthesize_detailed, EvaluationReport, GriffinLimConfig, ReportMetadata, SynthesisRequest};
use lrtts::vc::augment_corpus;

#[derive(Parser)]
#[command(name = "lrtts", version, about = "Low-resource expressive TTS training and synthesis")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-speaker corpus plus a matching config.
    Toy(ToyArgs),
    /// Voice-conversion model (stage 1).
    #[command(subcommand)]
    Vc(VcCommand),
    /// Staged training.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Stand-alone duration model.
    #[command(subcommand)]
    Duration(DurationCommand),
    /// Synthesize one utterance from a bundle.
    Synth(SynthArgs),
    /// Objective evaluation and gap-closure arithmetic.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    speakers: usize,
    #[arg(long, default_value_t = 8)]
    target_utterances: usize,
    #[arg(long, default_value_t = 8)]
    support_utterances: usize,
    #[arg(long, default_value_t = 3)]
    min_duration: u32,
    #[arg(long, default_value_t = 7)]
    max_duration: u32,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON overrides merged over the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Reuse checkpoints written under a different config.
    #[arg(long)]
    force: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let profile: Profile = self.profile.parse()?;
        Ok(match &self.config {
            Some(p) => PipelineConfig::load(p, profile).with_context(|| format!("loading {}", p.display()))?,
            None => PipelineConfig::profile(profile),
        })
    }
}

#[derive(Subcommand)]
enum VcCommand {
    /// Train the VC model and write the augmented corpus (stage 1).
    Train(ConfigArgs),
    /// Convert one supporting speaker with the trained VC model.
    Augment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        source_speaker: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PipelineCommand {
    Run {
        /// 1-4, or "all".
        #[arg(long)]
        stage: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint and stop after this many updates in the stage.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Print the merged config and its hash.
    Show(ConfigArgs),
}

#[derive(Subcommand)]
enum DurationCommand {
    /// Train a separate duration model on the configured corpus.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict durations with a bundle's duration model.
    Predict {
        #[arg(long)]
        bundle: PathBuf,
        /// Space-separated phoneme symbols.
        #[arg(long)]
        text_phonemes: String,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Space-separated phoneme symbols.
    #[arg(long)]
    phonemes: String,
    #[arg(long)]
    speaker: String,
    #[arg(long)]
    bundle: PathBuf,
    /// Output file; `.wav` runs Griffin-Lim, `.mel` writes the feature cache.
    #[arg(long)]
    out: PathBuf,
    /// Space-separated frame counts overriding the duration model.
    #[arg(long)]
    durations: Option<String>,
    #[arg(long, default_value_t = 60)]
    iterations: usize,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true)]
struct EvalArgs {
    #[command(subcommand)]
    gap: Option<EvalCommand>,
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    #[arg(long)]
    gt_dir: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Bundle the predictions came from (for report metadata).
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Extra gap-closure entries, `name=recordings,baseline,candidate`.
    #[arg(long = "gap-entry")]
    gap_entries: Vec<String>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Percent of the baseline-to-recordings gap closed by the candidate.
    Gap {
        #[arg(long)]
        recordings: f64,
        #[arg(long)]
        baseline: f64,
        #[arg(long)]
        candidate: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(if cli.quiet { tracing::Level::WARN } else { tracing::Level::INFO })
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Toy(a) => toy_cmd(a),
        Command::Vc(c) => vc_cmd(c),
        Command::Pipeline(c) => pipeline_cmd(c),
        Command::Duration(c) => duration_cmd(c),
        Command::Synth(a) => synth_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    }
}

fn toy_cmd(a: ToyArgs) -> Result<()> {
    let cfg = ToyConfig {
        seed: a.seed,
        n_speakers: a.speakers,
        target_utterances: a.target_utterances,
        support_utterances: a.support_utterances,
        min_duration: a.min_duration,
        max_duration: a.max_duration,
        ..ToyConfig::default()
    };
    let corpus = toy::generate(&cfg)?;
    let manifest = corpus.write(&a.out)?;
    let config = serde_json::json!({
        "target_speaker": corpus.target,
        "manifest": "manifest.jsonl",
        "speakers": "speakers.json",
        "vocab": "vocab.json",
        "work_dir": "run",
        "mel": corpus.mel,
    });
    let config_path = a.out.join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&config)? + "\n")?;
    println!("{}", manifest.display());
    println!("{}", config_path.display());
    Ok(())
}

fn vc_cmd(c: VcCommand) -> Result<()> {
    match c {
        VcCommand::Train(args) => {
            let cfg = args.load()?;
            let out = pipeline::run_stage(1, &cfg, &RunOptions { force: args.force, stop_after: None }, &mut NoAudit)?;
            println!("{}", serde_json::json!({"stage": 1, "steps": out.stage_step}));
        }
        VcCommand::Augment { cfg: args, source_speaker, out } => {
            let cfg = args.load()?;
            let model = pipeline::load_vc(&cfg, args.force)?;
            let inputs = pipeline::load_inputs(&cfg)?;
            let sources: Vec<_> = inputs
                .records
                .into_iter()
                .filter(|r| r.speaker_id == source_speaker && !r.synthetic)
                .collect();
            if sources.is_empty() {
                bail!("no ground-truth records for speaker {source_speaker}");
            }
            let target = inputs.speakers.get(&cfg.target_speaker)?.vector.clone();
            let augmented = augment_corpus(&model, &sources, &cfg.target_speaker, &target)?;
            let manifest = save_corpus(&out, &augmented, &inputs.vocab)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn pipeline_cmd(c: PipelineCommand) -> Result<()> {
    match c {
        PipelineCommand::Run { stage, cfg: args, stop_after } => {
            let cfg = args.load()?;
            let stages: Vec<u8> = if stage == "all" {
                vec![1, 2, 3, 4]
            } else {
                vec![stage.parse().with_context(|| format!("stage must be 1-4 or all, got {stage}"))?]
            };
            let opts = RunOptions { force: args.force, stop_after };
            for s in stages {
                let out = pipeline::run_stage(s, &cfg, &opts, &mut NoAudit)?;
                println!(
                    "{}",
                    serde_json::json!({
                        "stage": out.stage,
                        "steps_run": out.steps_run,
                        "stage_step": out.stage_step,
                        "global_step": out.global_step,
                        "complete": out.complete,
                    })
                );
            }
        }
        PipelineCommand::Show(args) => {
            let cfg = args.load()?;
            let mut v = serde_json::to_value(&cfg)?;
            v["config_hash"] = cfg.hash().into();
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
    }
    Ok(())
}

fn duration_cmd(c: DurationCommand) -> Result<()> {
    match c {
        DurationCommand::Train { cfg: args, out } => {
            let cfg = args.load()?;
            let inputs = pipeline::load_inputs(&cfg)?;
            let acoustic = cfg.acoustic_config(inputs.vocab.len(), cfg.mel.n_mels, inputs.speakers.dim());
            let mut dcfg = cfg.duration_config(inputs.vocab.len(), inputs.speakers.dim(), &acoustic);
            if dcfg.mode == DurationMode::Joint {
                bail!("joint duration heads train inside the pipeline; use `pipeline run`");
            }
            dcfg.dropout = cfg.dropout;
            let train = DurationTrainConfig {
                steps: cfg.duration.steps,
                batch_size: cfg.duration.batch_size,
                seed: cfg.seed,
                lr: cfg.lr.clone(),
                adam: cfg.adam.clone(),
                clip_norm: cfg.clip_norm,
            };
            let (model, log) = train_duration_model(&inputs.records, &inputs.speakers, dcfg, &train)?;
            fs::create_dir_all(&out)?;
            let mut w = std::io::BufWriter::new(fs::File::create(out.join("params.bin"))?);
            model.params.write_to(&mut w)?;
            fs::write(out.join("model.json"), serde_json::to_string_pretty(&model.cfg)?)?;
            println!("{}", serde_json::json!({"steps": log.losses.len(), "final_loss": log.losses.last()}));
        }
        DurationCommand::Predict { bundle, text_phonemes } => {
            let b = Bundle::load(&bundle)?;
            let symbols: Vec<&str> = text_phonemes.split_whitespace().collect();
            let phonemes = b.vocab.encode(&symbols)?;
            let pred = match b.duration.cfg.mode {
                DurationMode::Separate => predict_durations(&b.duration, &phonemes, &b.speaker.vector)?,
                DurationMode::Joint => {
                    let x = b.acoustic.phoneme_embeddings(&phonemes)?;
                    predict_durations_joint(&b.duration, &x, &b.centroid)?
                }
            };
            let quantized = lrtts::duration::quantize_durations(&pred);
            println!("{}", serde_json::json!({"predicted": pred, "frames": quantized.frames()}));
        }
    }
    Ok(())
}

fn parse_durations(s: &str) -> Result<DurationSequence> {
    let frames = s
        .split_whitespace()
        .map(|t| t.parse::<u32>().with_context(|| format!("bad duration {t:?}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(DurationSequence::new(frames))
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let bundle = Bundle::load(&a.bundle)?;
    let symbols: Vec<&str> = a.phonemes.split_whitespace().collect();
    let mut req = SynthesisRequest::new(bundle.vocab.encode(&symbols)?, a.speaker);
    req.durations = a.durations.as_deref().map(parse_durations).transpose()?;
    let out = synthesize_detailed(&req, &bundle)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    match a.out.extension().and_then(|e| e.to_str()) {
        Some("wav") => {
            let gl = GriffinLimConfig { iterations: a.iterations, ..GriffinLimConfig::default() };
            mel_invert(&out.mel, &bundle.mel, &gl)?.write_wav(&a.out)?;
        }
        Some("mel") => write_feature_cache(&a.out, &out.mel)?,
        _ => bail!("--out must end in .wav or .mel"),
    }
    let sidecar = a.out.with_extension("durations.json");
    fs::write(&sidecar, serde_json::to_string(out.durations.frames())?)?;
    println!(
        "{}",
        serde_json::json!({
            "out": a.out,
            "frames": out.mel.frames(),
            "durations": out.durations.frames(),
        })
    );
    Ok(())
}

/// Mel for `stem` in `dir`: a `.mel` cache, or a `.wav` analysed with `cfg`.
fn load_mel(path: &Path, cfg: &MelConfig) -> Result<MelSpectrogram> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("mel") => Ok(read_feature_cache(path)?),
        Some("wav") => Ok(extract_mel(&Waveform::read_wav(path)?, cfg)?),
        _ => bail!("unsupported file {}", path.display()),
    }
}

/// `stem → path` for mel-bearing files, `.mel` preferred over `.wav`.
fn index_dir(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        if ext == "mel" || (ext == "wav" && !out.contains_key(stem)) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

fn read_durations(path: &Path) -> Result<Option<Vec<f64>>> {
    if !path.is_file() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    if let Some(EvalCommand::Gap { recordings, baseline, candidate }) = a.gap {
        let pct = gap_closure(recordings, baseline, candidate)?;
        println!("{}", serde_json::json!({"gap_closure_percent": pct}));
        return Ok(());
    }
    let (Some(pred_dir), Some(gt_dir), Some(report_path)) = (a.pred_dir, a.gt_dir, a.report) else {
        bail!("eval needs --pred-dir, --gt-dir and --report (or the `gap` subcommand)");
    };
    let bundle = a.bundle.as_deref().map(Bundle::load).transpose()?;
    let (metadata, checkpoint, mel_cfg) = match &bundle {
        Some(b) => (
            ReportMetadata::from_bundle(b),
            format!("bundle:stage{}:{}", b.stage, &b.config_hash[..12.min(b.config_hash.len())]),
            b.mel.clone(),
        ),
        None => (ReportMetadata::default(), "unknown".to_string(), MelConfig::default()),
    };
    let mut report = EvaluationReport::new(metadata);
    let preds = index_dir(&pred_dir)?;
    let gts = index_dir(&gt_dir)?;
    for (stem, pred_path) in &preds {
        let Some(gt_path) = gts.get(stem) else {
            tracing::warn!(stem, "no reference; skipped");
            continue;
        };
        let pred = load_mel(pred_path, &mel_cfg)?;
        let gt = load_mel(gt_path, &mel_cfg)?;
        let pd = read_durations(&pred_dir.join(format!("{stem}.durations.json")))?;
        let gd = read_durations(&gt_dir.join(format!("{stem}.durations.json")))?
            .map(|v| DurationSequence::new(v.into_iter().map(|x| x.round().max(0.0) as u32).collect()));
        let durs = match (&pd, &gd) {
            (Some(p), Some(g)) => Some((p.as_slice(), g)),
            _ => None,
        };
        report.add_utterance(stem, &checkpoint, &pred, &gt, durs)?;
    }
    if report.utterances.is_empty() {
        bail!("no prediction in {} has a reference in {}", pred_dir.display(), gt_dir.display());
    }
    for entry in &a.gap_entries {
        let (name, nums) = entry.split_once('=').context("gap entry must be name=R,B,C")?;
        let v = nums
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .context("gap entry scores must be numbers")?;
        let [r, b, c] = v[..] else { bail!("gap entry {name} needs three scores") };
        report.add_gap_closure(name, r, b, c)?;
    }
    report.finalize()?;
    emit_report(&report, &report_path)?;
    println!("{}", report_path.display());
    Ok(())
}
