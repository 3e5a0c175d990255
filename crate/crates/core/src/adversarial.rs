//! Conditional discriminator over fixed-length mel crops, hinge losses and the
//! adversarial fine-tuning objective.

use std::collections::HashSet;

use lrtts_nn::layers::{Conv1d, Linear, SelfAttention, SpectralNorm};
use lrtts_nn::{Graph, Grads, Mat, ParamStore, Var};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TtsError};
use crate::optim::{adam_step, AdamConfig, AdamState};

pub const CROP_FRAMES: usize = 64;
pub const DEFAULT_ALPHA: f64 = 0.1;

/// Aligned mel and phoneme-embedding chunks with the utterance latent.
#[derive(Clone, Debug, PartialEq)]
pub struct MelCrop {
    pub mel: Mat,
    pub embedding: Mat,
    pub z: Vec<f64>,
    pub start_frame: usize,
}

/// Crop starting at `start`. Both matrices must have the same frame count.
pub fn crop_at(mel: &Mat, x_frames: &Mat, z: &[f64], start: usize) -> Result<MelCrop> {
    if mel.nrows() != x_frames.nrows() {
        return Err(TtsError::Shape(format!(
            "mel has {} frames but embeddings have {}",
            mel.nrows(),
            x_frames.nrows()
        )));
    }
    if start + CROP_FRAMES > mel.nrows() {
        return Err(TtsError::Shape(format!("crop at {start} overruns {} frames", mel.nrows())));
    }
    let rows = s![start..start + CROP_FRAMES, ..];
    Ok(MelCrop {
        mel: mel.slice(rows).to_owned(),
        embedding: x_frames.slice(rows).to_owned(),
        z: z.to_vec(),
        start_frame: start,
    })
}

/// Uniform start over `[0, T − 64]`; `Ok(None)` when the utterance is too
/// short and must be skipped for the adversarial loss.
pub fn crop_random(mel: &Mat, x_frames: &Mat, z: &[f64], rng: &mut impl Rng) -> Result<Option<MelCrop>> {
    if mel.nrows() < CROP_FRAMES {
        return Ok(None);
    }
    let start = rng.random_range(0..=mel.nrows() - CROP_FRAMES);
    crop_at(mel, x_frames, z, start).map(Some)
}

/// Mean of `real − fake`.
pub fn loss_generator(real: &[f64], fake: &[f64]) -> f64 {
    let n = real.len().min(fake.len());
    if n == 0 {
        return 0.0;
    }
    real.iter().zip(fake).map(|(r, f)| r - f).sum::<f64>() / n as f64
}

/// Mean of `ReLU(1 + fake) + ReLU(1 − real)`.
pub fn loss_discriminator(real: &[f64], fake: &[f64]) -> f64 {
    let n = real.len().min(fake.len());
    if n == 0 {
        return 0.0;
    }
    real.iter()
        .zip(fake)
        .map(|(r, f)| (1.0 + f).max(0.0) + (1.0 - r).max(0.0))
        .sum::<f64>()
        / n as f64
}

pub fn loss_gan_finetune(l1: f64, l_g: f64, alpha: f64) -> f64 {
    l1 + alpha * l_g
}

/// Adds `α·L_G` for one crop to the generator graph holding `pred`. The
/// discriminator runs in its own graph; its mel gradient, scaled by `−α`, is
/// injected over the cropped rows, so only the gradient of the returned term
/// is meaningful. The crop's conditioning is treated as constant.
pub fn inject_generator_loss(g: &mut Graph, pred: Var, real: &MelCrop, d: &Discriminator, alpha: f64) -> Result<(Var, MelCrop)> {
    let value = g.value(pred).clone();
    let start = real.start_frame;
    if start + CROP_FRAMES > value.nrows() {
        return Err(TtsError::Shape(format!("crop at {start} overruns {} predicted frames", value.nrows())));
    }
    let fake = MelCrop {
        mel: value.slice(s![start..start + CROP_FRAMES, ..]).to_owned(),
        ..real.clone()
    };
    let (_, grad) = d.score_and_mel_grad(&fake)?;
    // d(α·(D(real) − D(fake)))/d fake = −α·∇D(fake)
    let mut seed = Mat::zeros(value.dim());
    seed.slice_mut(s![start..start + CROP_FRAMES, ..]).assign(&(grad * -alpha));
    let sc = g.constant(seed);
    let inj = g.mul(pred, sc);
    Ok((g.sum(inj), fake))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub n_mels: usize,
    pub embedding_dim: usize,
    pub latent_dim: usize,
    pub cond_channels: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Self-attention follows this many conv blocks.
    pub attention_after: usize,
    pub leaky_slope: f64,
    /// Ablation switch: `false` feeds the mel alone.
    pub conditional: bool,
}

impl DiscriminatorConfig {
    pub fn new(n_mels: usize, embedding_dim: usize, latent_dim: usize) -> Self {
        Self {
            n_mels,
            embedding_dim,
            latent_dim,
            cond_channels: 64,
            channels: vec![64, 128, 256, 256],
            kernel: 4,
            attention_after: 2,
            leaky_slope: 0.1,
            conditional: true,
        }
    }
}

#[derive(Clone, Debug)]
struct Net {
    cond: Linear,
    blocks: Vec<Conv1d>,
    attention: SelfAttention,
    head: Linear,
}

pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub params: ParamStore,
    net: Net,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.attention_after == 0 || cfg.attention_after > cfg.channels.len() {
            return Err(TtsError::Config(format!("invalid discriminator config {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let cond = Linear::spectral_normed(&mut s, "disc.cond", cfg.embedding_dim.max(1), cfg.cond_channels, &mut rng);
        let mut width = cfg.n_mels;
        if cfg.conditional {
            width += cfg.cond_channels + cfg.latent_dim;
        }
        let pad = (cfg.kernel - 1) / 2;
        let blocks = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let name = format!("disc.conv{i}");
                let conv = Conv1d::new(&mut s, &name, width, c, cfg.kernel, 2, pad, &mut rng)
                    .with_spectral_norm(&mut s, &name, &mut rng);
                width = c;
                conv
            })
            .collect();
        let attention = SelfAttention::new(&mut s, "disc.attn", cfg.channels[cfg.attention_after - 1], &mut rng);
        let head = Linear::spectral_normed(&mut s, "disc.head", width, 1, &mut rng);
        Ok(Self {
            cfg,
            params: s,
            net: Net {
                cond,
                blocks,
                attention,
                head,
            },
        })
    }

    pub fn from_params(cfg: DiscriminatorConfig, stored: &ParamStore) -> Result<Self> {
        let mut d = Self::new(cfg, 0)?;
        d.params.load_values_from(stored)?;
        Ok(d)
    }

    pub fn spectral_norms(&self) -> Vec<&SpectralNorm> {
        let mut out: Vec<&SpectralNorm> = Vec::new();
        out.extend(self.net.cond.sn.as_ref());
        out.extend(self.net.blocks.iter().filter_map(|b| b.lin.sn.as_ref()));
        out.extend(self.net.attention.spectral_norms());
        out.extend(self.net.head.sn.as_ref());
        out
    }

    /// One power iteration per normalised weight.
    pub fn refresh_spectral_norms(&mut self) {
        let norms: Vec<SpectralNorm> = self.spectral_norms().into_iter().cloned().collect();
        for sn in norms {
            sn.power_iterate(&mut self.params, 1);
        }
    }

    /// `1 × 1` score for one crop.
    pub fn forward(&self, g: &mut Graph, mel: Var, embedding: Var, z: &[f64]) -> Result<Var> {
        let t = g.shape(mel).0;
        let mut x = mel;
        if self.cfg.conditional {
            if g.shape(embedding) != (t, self.cfg.embedding_dim) || z.len() != self.cfg.latent_dim {
                return Err(TtsError::Shape(format!(
                    "conditioning {:?} with latent {} for a {}-frame crop",
                    g.shape(embedding),
                    z.len(),
                    t
                )));
            }
            let c = self.net.cond.forward(g, embedding);
            let zb = g.constant(Array2::from_shape_fn((t, z.len()), |(_, j)| z[j]));
            x = g.concat_cols(&[mel, c, zb]);
        }
        for (i, block) in self.net.blocks.iter().enumerate() {
            let y = block.forward(g, x);
            x = g.leaky_relu(y, self.cfg.leaky_slope);
            if i + 1 == self.cfg.attention_after {
                x = self.net.attention.forward(g, x);
            }
        }
        let pooled = g.mean_rows(x);
        Ok(self.net.head.forward(g, pooled))
    }

    pub fn discriminate(&self, crop: &MelCrop) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let m = g.constant(crop.mel.clone());
        let e = g.constant(crop.embedding.clone());
        let s = self.forward(&mut g, m, e, &crop.z)?;
        Ok(g.scalar(s))
    }

    pub fn discriminate_batch(&self, crops: &[MelCrop]) -> Result<Vec<f64>> {
        crops.iter().map(|c| self.discriminate(c)).collect()
    }

    /// Score and its gradient with respect to the mel chunk.
    pub fn score_and_mel_grad(&self, crop: &MelCrop) -> Result<(f64, Mat)> {
        let mut g = Graph::new(&self.params);
        let m = g.constant(crop.mel.clone());
        let e = g.constant(crop.embedding.clone());
        let s = self.forward(&mut g, m, e, &crop.z)?;
        let grad = g.backward(s).wrt(m).cloned().unwrap_or_else(|| Mat::zeros(crop.mel.dim()));
        Ok((g.scalar(s), grad))
    }

    /// One hinge-loss update on paired real and fake crops, followed by a
    /// power iteration; returns the batch loss before the update.
    pub fn train_step(&mut self, adam: &mut AdamState, real: &[MelCrop], fake: &[MelCrop], lr: f64) -> Result<f64> {
        let n = real.len().min(fake.len());
        if n == 0 {
            return Ok(0.0);
        }
        let mut grads = Grads::zeros_like(&self.params);
        let mut total = 0.0;
        for (r, f) in real.iter().zip(fake).take(n) {
            let mut g = Graph::new(&self.params);
            let rm = g.constant(r.mel.clone());
            let re = g.constant(r.embedding.clone());
            let sr = self.forward(&mut g, rm, re, &r.z)?;
            let fm = g.constant(f.mel.clone());
            let fe = g.constant(f.embedding.clone());
            let sf = self.forward(&mut g, fm, fe, &f.z)?;
            let a = g.add_scalar(sf, 1.0);
            let a = g.relu(a);
            let b = g.scale(sr, -1.0);
            let b = g.add_scalar(b, 1.0);
            let b = g.relu(b);
            let loss = g.add(a, b);
            total += g.scalar(loss);
            grads.accumulate(g.backward(loss).param_grads());
        }
        grads.scale(1.0 / n as f64);
        adam_step(&mut self.params, &grads, adam, lr, &HashSet::new())?;
        self.refresh_spectral_norms();
        Ok(total / n as f64)
    }

    pub fn new_optimizer(&self) -> AdamState {
        AdamState::new(AdamConfig::default(), &self.params)
    }
}
