//! Corpus ingestion: manifests, forced-alignment durations, speaker-embedding
//! sidecars, mel features, record validation and data-reduction subsets.

pub mod expressivity;
pub mod mel;
pub mod toy;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result, TtsError};
pub use expressivity::{expressivity_profile, ExpressivityProfile, PitchConfig, Stat};
pub use mel::{extract_mel, MelConfig, Waveform};

/// Default floor inside the log of mel energies.
pub const LOG_FLOOR: f64 = 1e-5;

/// Fixed phoneme inventory. Ids index into `symbols`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

const ARPABET: &[&str] = &[
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH",
];

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(TtsError::Config(format!("duplicate vocabulary symbol {s}")));
            }
        }
        if symbols.is_empty() {
            return Err(TtsError::Config("empty vocabulary".into()));
        }
        Ok(Self { symbols, index })
    }

    /// Silence, short pause and word boundary followed by unstressed ARPAbet.
    pub fn arpabet() -> Self {
        let symbols = ["sil", "sp", "#"]
            .iter()
            .chain(ARPABET)
            .map(|s| s.to_string())
            .collect();
        Self::new(symbols).expect("static inventory is valid")
    }

    /// JSON list of symbols; id is list position.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::new(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.symbols)?).at(path)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        if self.index.is_empty() {
            return self.symbols.iter().position(|s| s == symbol);
        }
        self.index.get(symbol).copied()
    }

    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Result<PhonemeSequence> {
        let ids = symbols
            .iter()
            .map(|s| {
                self.id(s.as_ref())
                    .ok_or_else(|| TtsError::Validation(format!("unknown phoneme {}", s.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        PhonemeSequence::new(ids, self.len())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSequence {
    ids: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(TtsError::Validation("empty phoneme sequence".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(TtsError::Validation(format!(
                "phoneme id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `T × B` log-amplitude mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    data: Array2<f64>,
    pub frame_hop_s: f64,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn new(data: Array2<f64>, frame_hop_s: f64, sample_rate: u32) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(TtsError::Shape("mel spectrogram needs at least one frame and bin".into()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TtsError::Validation("mel spectrogram has non-finite values".into()));
        }
        Ok(Self {
            data,
            frame_hop_s,
            sample_rate,
        })
    }

    /// Wraps a model prediction, lifting values below `log_floor` onto it.
    pub fn from_prediction(mut data: Array2<f64>, cfg: &MelConfig) -> Result<Self> {
        let floor = cfg.log_floor.ln();
        data.mapv_inplace(|x| x.max(floor));
        Self::new(data, cfg.hop_seconds(), cfg.sample_rate)
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn seconds(&self) -> f64 {
        self.frames() as f64 * self.frame_hop_s
    }
}

/// Integer frame count per phoneme.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationSequence(Vec<u32>);

impl DurationSequence {
    pub fn new(frames: Vec<u32>) -> Self {
        Self(frames)
    }

    pub fn frames(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().map(|&d| d as usize).sum()
    }

    /// Phoneme index of every frame. Zero-duration phonemes emit no frames.
    pub fn frame_to_phoneme(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .flat_map(|(p, &d)| std::iter::repeat_n(p, d as usize))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub speaker_id: String,
    pub vector: Vec<f64>,
}

impl SpeakerEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn as_row(&self) -> Array2<f64> {
        Array2::from_shape_vec((1, self.vector.len()), self.vector.clone()).expect("row shape")
    }
}

/// All speaker embeddings of a run; every vector has the same dimension.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpeakerTable {
    speakers: BTreeMap<String, SpeakerEmbedding>,
}

impl SpeakerTable {
    pub fn new(entries: impl IntoIterator<Item = SpeakerEmbedding>) -> Result<Self> {
        let mut speakers = BTreeMap::new();
        let mut dim = None;
        for e in entries {
            match dim {
                None => dim = Some(e.dim()),
                Some(d) if d != e.dim() => {
                    return Err(TtsError::Validation(format!(
                        "speaker {} has embedding dimension {}, expected {d}",
                        e.speaker_id,
                        e.dim()
                    )))
                }
                _ => {}
            }
            speakers.insert(e.speaker_id.clone(), e);
        }
        Ok(Self { speakers })
    }

    /// Reads a JSON map `speaker_id → [float]`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let map: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)?;
        Self::new(map.into_iter().map(|(speaker_id, vector)| SpeakerEmbedding { speaker_id, vector }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<&str, &Vec<f64>> = self
            .speakers
            .iter()
            .map(|(k, v)| (k.as_str(), &v.vector))
            .collect();
        fs::write(path, serde_json::to_string_pretty(&map)?).at(path)
    }

    pub fn get(&self, speaker: &str) -> Result<&SpeakerEmbedding> {
        self.speakers
            .get(speaker)
            .ok_or_else(|| TtsError::UnknownSpeaker(speaker.to_string()))
    }

    pub fn dim(&self) -> usize {
        self.speakers.values().next().map_or(0, |s| s.dim())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.speakers.keys().map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker_id: String,
    pub phonemes: PhonemeSequence,
    pub mel: MelSpectrogram,
    pub durations: DurationSequence,
    pub synthetic: bool,
}

impl UtteranceRecord {
    pub fn seconds(&self) -> f64 {
        self.mel.seconds()
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub audio: PathBuf,
    pub speaker: String,
    pub phonemes: Vec<String>,
    pub alignment: PathBuf,
    #[serde(default)]
    pub synthetic: bool,
}

/// Parses a JSON-lines manifest, preserving file order. Blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| TtsError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        if let Some(first) = seen.insert(entry.id.clone(), line_no) {
            return Err(TtsError::Validation(format!(
                "{}: duplicate utterance id {} on line {line_no} (first seen on line {first})",
                path.display(),
                entry.id
            )));
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    fs::write(path, out).at(path)
}

#[derive(Debug, Deserialize, Serialize)]
struct AlignmentEntry {
    phoneme: String,
    frames: i64,
}

/// Reads `[{phoneme, frames}, …]` and cross-checks labels against the
/// manifest's phoneme list.
pub fn load_alignment(path: &Path, manifest_phonemes: &[String]) -> Result<DurationSequence> {
    let text = fs::read_to_string(path).at(path)?;
    let entries: Vec<AlignmentEntry> = serde_json::from_str(&text)?;
    if entries.len() != manifest_phonemes.len() {
        return Err(TtsError::Alignment(format!(
            "{}: {} alignment entries for {} manifest phonemes",
            path.display(),
            entries.len(),
            manifest_phonemes.len()
        )));
    }
    let mut frames = Vec::with_capacity(entries.len());
    for (i, (e, expected)) in entries.iter().zip(manifest_phonemes).enumerate() {
        if e.frames < 0 {
            return Err(TtsError::Validation(format!(
                "{}: entry {i} has negative frame count {}",
                path.display(),
                e.frames
            )));
        }
        if &e.phoneme != expected {
            return Err(TtsError::Alignment(format!(
                "{}: entry {i} is {:?} but the manifest has {:?}",
                path.display(),
                e.phoneme,
                expected
            )));
        }
        frames.push(u32::try_from(e.frames).map_err(|_| {
            TtsError::Validation(format!("{}: frame count {} too large", path.display(), e.frames))
        })?);
    }
    Ok(DurationSequence::new(frames))
}

pub fn write_alignment(path: &Path, phonemes: &[String], durations: &DurationSequence) -> Result<()> {
    let entries: Vec<AlignmentEntry> = phonemes
        .iter()
        .zip(durations.frames())
        .map(|(p, &d)| AlignmentEntry {
            phoneme: p.clone(),
            frames: d as i64,
        })
        .collect();
    fs::write(path, serde_json::to_string(&entries)?).at(path)
}

/// Largest duration/frame drift corrected automatically.
pub const DURATION_TOLERANCE: usize = 2;

/// Reconciles durations with the mel frame count. Drifts of up to
/// [`DURATION_TOLERANCE`] frames are absorbed by the last nonzero phoneme.
pub fn validate_record(mut record: UtteranceRecord) -> Result<UtteranceRecord> {
    if record.durations.len() != record.phonemes.len() {
        return Err(TtsError::Alignment(format!(
            "{}: {} durations for {} phonemes",
            record.id,
            record.durations.len(),
            record.phonemes.len()
        )));
    }
    let total = record.durations.total();
    let frames = record.mel.frames();
    if total.abs_diff(frames) > DURATION_TOLERANCE {
        return Err(TtsError::DurationMismatch {
            durations: total,
            frames,
        });
    }
    if total != frames {
        let mut d = record.durations.0.clone();
        let last = d
            .iter()
            .rposition(|&x| x > 0)
            .ok_or(TtsError::DurationMismatch {
                durations: total,
                frames,
            })?;
        if frames > total {
            d[last] += (frames - total) as u32;
        } else {
            let mut excess = (total - frames) as u32;
            for x in d[..=last].iter_mut().rev() {
                let take = excess.min(*x);
                *x -= take;
                excess -= take;
                if excess == 0 {
                    break;
                }
            }
        }
        record.durations = DurationSequence::new(d);
    }
    Ok(record)
}

/// Reads every manifest entry into a validated record. Relative paths are
/// resolved against the manifest's directory; `.mel` audio paths are read as
/// feature caches, anything else as WAV.
pub fn load_corpus(manifest: &Path, vocab: &Vocabulary, cfg: &MelConfig) -> Result<Vec<UtteranceRecord>> {
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &Path| -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    load_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let audio = resolve(&e.audio);
            let mel = if audio.extension().is_some_and(|x| x == "mel") {
                mel::read_feature_cache(&audio)?
            } else {
                let wav = Waveform::read_wav(&audio)?;
                extract_mel(&wav, cfg)?
            };
            if mel.bins() != cfg.n_mels {
                return Err(TtsError::Shape(format!(
                    "{}: {} mel bins, corpus uses {}",
                    e.id,
                    mel.bins(),
                    cfg.n_mels
                )));
            }
            let durations = load_alignment(&resolve(&e.alignment), &e.phonemes)?;
            validate_record(UtteranceRecord {
                phonemes: vocab.encode(&e.phonemes)?,
                id: e.id,
                speaker_id: e.speaker,
                mel,
                durations,
                synthetic: e.synthetic,
            })
        })
        .collect()
}

/// Writes records as `.mel` feature caches plus alignments and a manifest.
pub fn save_corpus(dir: &Path, records: &[UtteranceRecord], vocab: &Vocabulary) -> Result<PathBuf> {
    let features = dir.join("features");
    let alignments = dir.join("alignments");
    fs::create_dir_all(&features).at(&features)?;
    fs::create_dir_all(&alignments).at(&alignments)?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let symbols: Vec<String> = r
            .phonemes
            .ids()
            .iter()
            .map(|&i| vocab.symbols()[i].clone())
            .collect();
        let audio = PathBuf::from("features").join(format!("{}.mel", r.id));
        let alignment = PathBuf::from("alignments").join(format!("{}.json", r.id));
        mel::write_feature_cache(&dir.join(&audio), &r.mel)?;
        write_alignment(&dir.join(&alignment), &symbols, &r.durations)?;
        entries.push(ManifestEntry {
            id: r.id.clone(),
            audio,
            speaker: r.speaker_id.clone(),
            phonemes: symbols,
            alignment,
            synthetic: r.synthetic,
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Data-reduction subset: shuffled target-speaker utterances are added until
/// the next one would exceed `budget_seconds`. Other speakers pass through.
/// Output keeps the input order.
pub fn reduce_corpus(
    records: &[UtteranceRecord],
    target_speaker: &str,
    budget_seconds: f64,
    seed: u64,
) -> Result<Vec<UtteranceRecord>> {
    if budget_seconds <= 0.0 || !budget_seconds.is_finite() {
        return Err(TtsError::Validation(format!("budget must be positive, got {budget_seconds}")));
    }
    let mut target: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.speaker_id == target_speaker)
        .map(|(i, _)| i)
        .collect();
    if target.is_empty() {
        return Err(TtsError::UnknownSpeaker(target_speaker.to_string()));
    }
    target.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = HashSet::new();
    let mut total = 0.0;
    for i in target {
        let len = records[i].seconds();
        if total + len > budget_seconds {
            break;
        }
        total += len;
        keep.insert(i);
    }
    Ok(records
        .iter()
        .enumerate()
        .filter(|(i, r)| r.speaker_id != target_speaker || keep.contains(i))
        .map(|(_, r)| r.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(durations: Vec<u32>, frames: usize) -> UtteranceRecord {
        let n = durations.len();
        UtteranceRecord {
            id: "u".into(),
            speaker_id: "s".into(),
            phonemes: PhonemeSequence::new(vec![0; n], 4).unwrap(),
            mel: MelSpectrogram::new(Array2::zeros((frames, 3)), 0.01, 100).unwrap(),
            durations: DurationSequence::new(durations),
            synthetic: false,
        }
    }

    #[test]
    fn validate_keeps_matching_durations() {
        let r = validate_record(record(vec![50, 50], 100)).unwrap();
        assert_eq!(r.durations.frames(), &[50, 50]);
    }

    #[test]
    fn validate_extends_last_nonzero() {
        let r = validate_record(record(vec![3, 2], 6)).unwrap();
        assert_eq!(r.durations.frames(), &[3, 3]);
        let r = validate_record(record(vec![3, 2, 0], 7)).unwrap();
        assert_eq!(r.durations.frames(), &[3, 4, 0]);
    }

    #[test]
    fn validate_shrinks_across_phonemes() {
        let r = validate_record(record(vec![3, 1], 2)).unwrap();
        assert_eq!(r.durations.frames(), &[2, 0]);
    }

    #[test]
    fn validate_rejects_large_mismatch() {
        match validate_record(record(vec![45, 45], 100)) {
            Err(TtsError::DurationMismatch { durations, frames }) => {
                assert_eq!((durations, frames), (90, 100))
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn validate_rejects_length_mismatch() {
        let mut r = record(vec![3, 3], 6);
        r.phonemes = PhonemeSequence::new(vec![0, 1, 2], 4).unwrap();
        assert!(matches!(validate_record(r), Err(TtsError::Alignment(_))));
    }

    #[test]
    fn frame_map_skips_empty_phonemes() {
        let d = DurationSequence::new(vec![2, 0, 3]);
        assert_eq!(d.frame_to_phoneme(), vec![0, 0, 2, 2, 2]);
        assert_eq!(d.total(), 5);
    }

    #[test]
    fn vocabulary_rejects_unknown_symbol() {
        let v = Vocabulary::arpabet();
        assert!(v.encode(&["AA", "sil"]).is_ok());
        assert!(v.encode(&["QQ"]).is_err());
        assert!(v.encode::<&str>(&[]).is_err());
    }

    #[test]
    fn speaker_table_requires_uniform_dimension() {
        let a = SpeakerEmbedding { speaker_id: "a".into(), vector: vec![0.0; 3] };
        let b = SpeakerEmbedding { speaker_id: "b".into(), vector: vec![0.0; 4] };
        assert!(SpeakerTable::new([a, b]).is_err());
    }
}
