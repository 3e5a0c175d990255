//! Waveform I/O, short-time Fourier transform and log-mel features.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::MelSpectrogram;
use crate::error::{IoContext, Result, TtsError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            n_mels: 80,
            win_length: 1024,
            hop_length: 256,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: super::LOG_FLOOR,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.sample_rate == 0 || self.n_mels == 0 || self.hop_length == 0 || self.win_length < 2 {
            return Err(TtsError::Config(format!("degenerate mel config {self:?}")));
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(TtsError::Config(format!(
                "mel band [{}, {}] must lie inside [0, {nyquist}]",
                self.fmin, self.fmax
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(TtsError::Config("log floor must be positive".into()));
        }
        Ok(())
    }

    pub fn hop_seconds(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }

    pub fn n_freqs(&self) -> usize {
        self.win_length / 2 + 1
    }

    /// Frame count of an unpadded analysis of `n` samples.
    pub fn frames_for(&self, n: usize) -> Option<usize> {
        (n >= self.win_length).then(|| 1 + (n - self.win_length) / self.hop_length)
    }

    /// Sample count whose analysis yields exactly `frames` frames.
    pub fn samples_for(&self, frames: usize) -> usize {
        frames.saturating_sub(1) * self.hop_length + self.win_length
    }
}

/// Mono samples at a fixed rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads any PCM or float WAV, averaging channels to mono.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)
            .map_err(|e| TtsError::Audio(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let interleaved: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>(),
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / scale))
                    .collect::<std::result::Result<_, _>>()
            }
        }
        .map_err(|e| TtsError::Audio(format!("{}: {e}", path.display())))?;
        let samples = interleaved
            .chunks(channels)
            .map(|c| c.iter().sum::<f64>() / channels as f64)
            .collect();
        Ok(Self::new(samples, spec.sample_rate))
    }

    /// Writes 16-bit PCM, clipping to [−1, 1].
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let audio_err = |e: hound::Error| TtsError::Audio(format!("{}: {e}", path.display()));
        let mut w = hound::WavWriter::create(path, spec).map_err(audio_err)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
            w.write_sample(v).map_err(audio_err)?;
        }
        w.finalize().map_err(audio_err)
    }

    /// Integer-factor rate conversion: box-filtered decimation or linear
    /// interpolation.
    pub fn resample(&self, target_rate: u32) -> Result<Self> {
        let (src, dst) = (self.sample_rate, target_rate);
        if src == dst {
            return Ok(self.clone());
        }
        if dst > 0 && src % dst == 0 {
            let k = (src / dst) as usize;
            let samples = self
                .samples
                .chunks(k)
                .filter(|c| c.len() == k)
                .map(|c| c.iter().sum::<f64>() / k as f64)
                .collect();
            return Ok(Self::new(samples, dst));
        }
        if src > 0 && dst % src == 0 {
            let k = (dst / src) as usize;
            let s = &self.samples;
            let mut out = Vec::with_capacity(s.len() * k);
            for i in 0..s.len() {
                let next = s.get(i + 1).copied().unwrap_or(s[i]);
                for j in 0..k {
                    let t = j as f64 / k as f64;
                    out.push(s[i] * (1.0 - t) + next * t);
                }
            }
            return Ok(Self::new(out, dst));
        }
        Err(TtsError::Audio(format!(
            "cannot resample {src} Hz to {dst} Hz: only integer factors are supported"
        )))
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular filters.
pub fn mel_centers(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// `n_freqs × n_mels` triangular filterbank, each triangle peaking at 1.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.win_length as f64;
    Array2::from_shape_fn((cfg.n_freqs(), cfg.n_mels), |(k, m)| {
        let f = k as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        if f <= l || f >= r {
            0.0
        } else if f <= c {
            (f - l) / (c - l)
        } else {
            (r - f) / (r - c)
        }
    })
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Unpadded STFT with a Hann window and FFT size equal to the window.
pub struct Stft {
    win: usize,
    hop: usize,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(win: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            win,
            hop,
            window: hann(win),
            fwd: planner.plan_fft_forward(win),
            inv: planner.plan_fft_inverse(win),
        }
    }

    pub fn n_freqs(&self) -> usize {
        self.win / 2 + 1
    }

    /// `T × (win/2 + 1)` complex spectrum.
    pub fn forward(&self, samples: &[f64]) -> Result<Array2<Complex<f64>>> {
        if samples.len() < self.win {
            return Err(TtsError::Audio(format!(
                "waveform of {} samples is shorter than the {}-sample window",
                samples.len(),
                self.win
            )));
        }
        let frames = 1 + (samples.len() - self.win) / self.hop;
        let nf = self.n_freqs();
        let mut out = Array2::zeros((frames, nf));
        let mut buf = vec![Complex::new(0.0, 0.0); self.win];
        for t in 0..frames {
            let chunk = &samples[t * self.hop..t * self.hop + self.win];
            for ((b, &s), &w) in buf.iter_mut().zip(chunk).zip(&self.window) {
                *b = Complex::new(s * w, 0.0);
            }
            self.fwd.process(&mut buf);
            for (k, v) in buf[..nf].iter().enumerate() {
                out[[t, k]] = *v;
            }
        }
        Ok(out)
    }

    /// Weighted overlap-add inverse producing `(T − 1)·hop + win` samples.
    pub fn inverse(&self, spec: &Array2<Complex<f64>>) -> Vec<f64> {
        let frames = spec.nrows();
        let n = (frames.saturating_sub(1)) * self.hop + self.win;
        let mut out = vec![0.0; n];
        let mut norm = vec![0.0; n];
        let mut buf = vec![Complex::new(0.0, 0.0); self.win];
        let nf = self.n_freqs();
        for t in 0..frames {
            for k in 0..nf {
                buf[k] = spec[[t, k]];
            }
            for k in nf..self.win {
                buf[k] = spec[[t, self.win - k]].conj();
            }
            self.inv.process(&mut buf);
            let off = t * self.hop;
            for i in 0..self.win {
                let w = self.window[i];
                out[off + i] += buf[i].re / self.win as f64 * w;
                norm[off + i] += w * w;
            }
        }
        for (o, &z) in out.iter_mut().zip(&norm) {
            if z > 1e-8 {
                *o /= z;
            }
        }
        out
    }
}

/// Log-mel features: `ln(max(fbank(|STFT|²), floor))`.
pub fn extract_mel(wav: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if wav.sample_rate != cfg.sample_rate {
        return Err(TtsError::Audio(format!(
            "waveform is {} Hz, mel config expects {} Hz",
            wav.sample_rate, cfg.sample_rate
        )));
    }
    let spec = Stft::new(cfg.win_length, cfg.hop_length).forward(&wav.samples)?;
    let power = spec.mapv(|c| c.norm_sqr());
    let fb = mel_filterbank(cfg);
    let floor = cfg.log_floor;
    let mel = power.dot(&fb).mapv(|e| e.max(floor).ln());
    MelSpectrogram::new(mel, cfg.hop_seconds(), cfg.sample_rate)
}

const CACHE_MAGIC: &[u8; 8] = b"LRTTSMEL";

/// Header `{T: u32, B: u32, hop_s: f64, rate: u32}` then row-major `f32`.
pub fn write_feature_cache(path: &Path, mel: &MelSpectrogram) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).at(path)?);
    let mut body = Vec::with_capacity(28 + mel.data().len() * 4);
    body.extend_from_slice(CACHE_MAGIC);
    body.extend_from_slice(&(mel.frames() as u32).to_le_bytes());
    body.extend_from_slice(&(mel.bins() as u32).to_le_bytes());
    body.extend_from_slice(&mel.frame_hop_s.to_le_bytes());
    body.extend_from_slice(&mel.sample_rate.to_le_bytes());
    for &v in mel.data().iter() {
        body.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&body).at(path)?;
    w.flush().at(path)
}

pub fn read_feature_cache(path: &Path) -> Result<MelSpectrogram> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).at(path)?)
        .read_to_end(&mut bytes)
        .at(path)?;
    let bad = |m: &str| TtsError::Validation(format!("{}: {m}", path.display()));
    if bytes.len() < 28 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("not a feature cache"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let frames = u32_at(8) as usize;
    let bins = u32_at(12) as usize;
    let hop = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let rate = u32_at(24);
    let payload = &bytes[28..];
    if payload.len() != frames * bins * 4 {
        return Err(bad("payload size disagrees with header"));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let data = Array2::from_shape_vec((frames, bins), data).map_err(|e| bad(&e.to_string()))?;
    MelSpectrogram::new(data, hop, rate)
}
