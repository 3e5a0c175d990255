//! Per-speaker prosodic statistics: log-f0, log frame energy and phoneme
//! duration, each with first-order deltas.

use serde::{Deserialize, Serialize};

use super::{DurationSequence, Waveform};
use crate::error::{Result, TtsError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub var: f64,
}

impl Stat {
    /// Population mean and variance, computed on data shifted by its first
    /// element to avoid cancellation.
    pub fn of(values: &[f64]) -> Option<Self> {
        let &k = values.first()?;
        let n = values.len() as f64;
        let (s, s2) = values.iter().fold((0.0, 0.0), |(s, s2), &x| {
            let d = x - k;
            (s + d, s2 + d * d)
        });
        Some(Self {
            mean: k + s / n,
            var: ((s2 - s * s / n) / n).max(0.0),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchConfig {
    pub frame_length: usize,
    pub hop_length: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Frames with log mean-square energy at or below this are unvoiced.
    pub energy_threshold: f64,
    /// Minimum normalized autocorrelation at the chosen lag.
    pub min_correlation: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            frame_length: 1024,
            hop_length: 256,
            f0_min: 60.0,
            f0_max: 400.0,
            energy_threshold: (1e-4f64).ln(),
            min_correlation: 0.5,
        }
    }
}

/// Absent f0 statistics mean no voiced frame was found.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressivityProfile {
    pub speaker_id: String,
    pub log_f0: Option<Stat>,
    pub delta_log_f0: Option<Stat>,
    pub energy: Stat,
    pub delta_energy: Option<Stat>,
    pub duration: Stat,
    pub delta_duration: Option<Stat>,
}

pub struct ExpressivityInput<'a> {
    pub speaker_id: &'a str,
    pub waveform: &'a Waveform,
    pub durations: &'a DurationSequence,
}

/// Frame-wise log energy and f0 (`None` when unvoiced).
pub fn analyze_frames(wav: &Waveform, cfg: &PitchConfig) -> Vec<(f64, Option<f64>)> {
    let w = cfg.frame_length;
    let x = &wav.samples;
    if x.len() < w {
        return Vec::new();
    }
    let rate = wav.sample_rate as f64;
    let min_lag = ((rate / cfg.f0_max).floor() as usize).max(1);
    let max_lag = ((rate / cfg.f0_min).ceil() as usize).min(w - 1);
    let frames = 1 + (x.len() - w) / cfg.hop_length;
    (0..frames)
        .map(|t| {
            let f = &x[t * cfg.hop_length..t * cfg.hop_length + w];
            let energy = (f.iter().map(|v| v * v).sum::<f64>() / w as f64 + 1e-10).ln();
            if energy <= cfg.energy_threshold || min_lag > max_lag {
                return (energy, None);
            }
            let corr: Vec<f64> = (min_lag..=max_lag)
                .map(|lag| {
                    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
                    for i in 0..w - lag {
                        xy += f[i] * f[i + lag];
                        xx += f[i] * f[i];
                        yy += f[i + lag] * f[i + lag];
                    }
                    xy / (xx * yy).sqrt().max(1e-20)
                })
                .collect();
            let best = corr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if best < cfg.min_correlation {
                return (energy, None);
            }
            // Earliest local peak close to the global best avoids octave drops.
            let pick = (0..corr.len())
                .find(|&i| {
                    corr[i] >= 0.9 * best
                        && (i == 0 || corr[i] >= corr[i - 1])
                        && (i + 1 == corr.len() || corr[i] >= corr[i + 1])
                })
                .unwrap_or(0);
            (energy, Some(rate / (min_lag + pick) as f64))
        })
        .collect()
}

pub fn expressivity_profile(inputs: &[ExpressivityInput], cfg: &PitchConfig) -> Result<ExpressivityProfile> {
    let first = inputs
        .first()
        .ok_or_else(|| TtsError::Validation("expressivity needs at least one record".into()))?;
    if let Some(other) = inputs.iter().find(|i| i.speaker_id != first.speaker_id) {
        return Err(TtsError::Validation(format!(
            "mixed speakers {} and {} in one expressivity profile",
            first.speaker_id, other.speaker_id
        )));
    }
    let (mut lf0, mut dlf0, mut en, mut den, mut dur, mut ddur) =
        (vec![], vec![], vec![], vec![], vec![], vec![]);
    for input in inputs {
        let frames = analyze_frames(input.waveform, cfg);
        for (i, &(e, f0)) in frames.iter().enumerate() {
            en.push(e);
            if i > 0 {
                den.push(e - frames[i - 1].0);
            }
            if let Some(f) = f0 {
                lf0.push(f.ln());
                if let Some(prev) = i.checked_sub(1).and_then(|j| frames[j].1) {
                    dlf0.push(f.ln() - prev.ln());
                }
            }
        }
        let d: Vec<f64> = input.durations.frames().iter().map(|&v| v as f64).collect();
        ddur.extend(d.windows(2).map(|p| p[1] - p[0]));
        dur.extend(d);
    }
    let missing = |what: &str| TtsError::Validation(format!("no {what} for speaker {}", first.speaker_id));
    Ok(ExpressivityProfile {
        speaker_id: first.speaker_id.to_string(),
        log_f0: Stat::of(&lf0),
        delta_log_f0: Stat::of(&dlf0),
        energy: Stat::of(&en).ok_or_else(|| missing("analysis frames"))?,
        delta_energy: Stat::of(&den),
        duration: Stat::of(&dur).ok_or_else(|| missing("phonemes"))?,
        delta_duration: Stat::of(&ddur),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, n: usize) -> Waveform {
        Waveform::new(
            (0..n).map(|i| 0.3 * (2.0 * PI * freq * i as f64 / 22050.0).sin()).collect(),
            22050,
        )
    }

    fn profile(wavs: &[Waveform], durs: &DurationSequence) -> ExpressivityProfile {
        let inputs: Vec<_> = wavs
            .iter()
            .map(|w| ExpressivityInput { speaker_id: "s", waveform: w, durations: durs })
            .collect();
        expressivity_profile(&inputs, &PitchConfig::default()).unwrap()
    }

    #[test]
    fn stat_matches_naive_formula() {
        let v = [1.0, 2.0, 4.0, 7.0];
        let s = Stat::of(&v).unwrap();
        assert!((s.mean - 3.5).abs() < 1e-12);
        assert!((s.var - 5.25).abs() < 1e-12);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn constant_tone_has_zero_pitch_variance() {
        let d = DurationSequence::new(vec![5, 5, 5]);
        let p = profile(&[tone(150.0, 8000), tone(150.0, 6000)], &d);
        let f0 = p.log_f0.unwrap();
        assert_eq!(f0.var, 0.0);
        assert!((f0.mean.exp() - 150.0).abs() < 2.0);
        assert_eq!(p.delta_log_f0.unwrap().var, 0.0);
        assert_eq!(p.duration, Stat { mean: 5.0, var: 0.0 });
    }

    #[test]
    fn alternating_pitch_raises_variance() {
        let d = DurationSequence::new(vec![4, 6]);
        let flat = profile(&[tone(110.0, 8000), tone(110.0, 8000)], &d);
        let alt = profile(&[tone(110.0, 8000), tone(220.0, 8000)], &d);
        assert!(alt.log_f0.unwrap().var > flat.log_f0.unwrap().var);
        let mean = alt.log_f0.unwrap().mean.exp();
        assert!(mean > 150.0 && mean < 160.0, "geometric mean {mean}");
    }

    #[test]
    fn silence_leaves_pitch_absent() {
        let d = DurationSequence::new(vec![2]);
        let p = profile(&[Waveform::new(vec![0.0; 4000], 22050)], &d);
        assert!(p.log_f0.is_none());
        assert!(p.delta_duration.is_none());
    }

    #[test]
    fn mixed_speakers_rejected() {
        let w = tone(100.0, 4000);
        let d = DurationSequence::new(vec![1]);
        let inputs = [
            ExpressivityInput { speaker_id: "a", waveform: &w, durations: &d },
            ExpressivityInput { speaker_id: "b", waveform: &w, durations: &d },
        ];
        assert!(expressivity_profile(&inputs, &PitchConfig::default()).is_err());
    }
}
