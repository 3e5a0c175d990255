//! Non-autoregressive acoustic model: phoneme encoder, VAE prosody encoder,
//! duration-driven upsampling with positional features and a gated-conv plus
//! LSTM decoder.

pub mod loss;
pub mod position;

use lrtts_nn::layers::{BiLstm, Conv1d, Embedding, Gru, Linear, Lstm};
use lrtts_nn::{Graph, Mat, ParamId, ParamStore, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{DurationSequence, PhonemeSequence, UtteranceRecord};
use crate::error::{Result, TtsError};
pub use loss::{kl_anneal_weight, kl_divergence, kl_graph, l1_graph, l1_loss, loss_train, loss_train_graph, KlSchedule};
pub use position::{positional_features, sinusoidal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticConfig {
    pub vocab_size: usize,
    pub n_mels: usize,
    pub speaker_dim: usize,
    pub encoder_hidden: usize,
    pub encoder_convs: usize,
    pub encoder_kernel: usize,
    pub vae_channels: usize,
    pub vae_convs: usize,
    pub vae_kernel: usize,
    pub vae_rnn: usize,
    pub latent_dim: usize,
    pub position_dim: usize,
    pub decoder_hidden: usize,
    pub decoder_blocks: usize,
    pub decoder_kernel: usize,
    pub decoder_lstm_layers: usize,
    pub decoder_lstm_hidden: usize,
    pub dropout: f64,
}

impl AcousticConfig {
    pub fn paper(vocab_size: usize, n_mels: usize, speaker_dim: usize) -> Self {
        Self {
            vocab_size,
            n_mels,
            speaker_dim,
            encoder_hidden: 512,
            encoder_convs: 3,
            encoder_kernel: 3,
            vae_channels: 512,
            vae_convs: 6,
            vae_kernel: 5,
            vae_rnn: 128,
            latent_dim: 64,
            position_dim: 32,
            decoder_hidden: 512,
            decoder_blocks: 9,
            decoder_kernel: 15,
            decoder_lstm_layers: 2,
            decoder_lstm_hidden: 512,
            dropout: 0.1,
        }
    }

    /// Same topology with every hidden width set to `hidden`, a VAE recurrent
    /// width of `hidden / 2` and a latent of `hidden / 4`.
    pub fn scaled(vocab_size: usize, n_mels: usize, speaker_dim: usize, hidden: usize) -> Self {
        Self {
            encoder_hidden: hidden,
            vae_channels: hidden,
            vae_rnn: (hidden / 2).max(2),
            latent_dim: (hidden / 4).max(1),
            position_dim: 16.min(hidden).max(2),
            decoder_hidden: hidden,
            decoder_lstm_hidden: hidden,
            ..Self::paper(vocab_size, n_mels, speaker_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let odd = [self.encoder_kernel, self.vae_kernel, self.decoder_kernel];
        if odd.iter().any(|k| k % 2 == 0) {
            return Err(TtsError::Config("convolution kernels must be odd".into()));
        }
        if self.encoder_hidden < 2 || !self.encoder_hidden.is_multiple_of(2) {
            return Err(TtsError::Config("encoder hidden width must be even".into()));
        }
        if !self.position_dim.is_multiple_of(2) {
            return Err(TtsError::Config("positional width must be even".into()));
        }
        if self.vocab_size == 0 || self.n_mels == 0 || self.latent_dim == 0 {
            return Err(TtsError::Config("vocabulary, mel bins and latent must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TtsError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Width of one frame of decoder conditioning.
    pub fn condition_dim(&self) -> usize {
        self.encoder_hidden + self.latent_dim + self.speaker_dim + 2 + 2 * self.position_dim + 1
    }
}

/// Diagonal Gaussian posterior over the prosody latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaePosterior {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl VaePosterior {
    /// Reparameterised draw `μ + σ ⊙ ε`.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.mu.len()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with(&eps)
    }

    pub fn sample_with(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .zip(eps)
            .map(|((&m, &ls), &e)| m + ls.exp() * e)
            .collect()
    }
}

/// Mean of posterior means.
pub fn vae_centroid(posteriors: &[VaePosterior]) -> Result<Vec<f64>> {
    let first = posteriors
        .first()
        .ok_or_else(|| TtsError::Validation("centroid of an empty posterior set".into()))?;
    let mut acc = vec![0.0; first.mu.len()];
    for p in posteriors {
        if p.mu.len() != acc.len() {
            return Err(TtsError::Shape("posteriors of differing latent width".into()));
        }
        for (a, &m) in acc.iter_mut().zip(&p.mu) {
            *a += m;
        }
    }
    let n = posteriors.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Graph outputs of one training forward pass.
pub struct Forward {
    pub pred: Var,
    pub target: Var,
    pub mu: Var,
    pub log_sigma: Var,
    pub x_tilde: Var,
}

#[derive(Clone, Debug)]
struct Net {
    embedding: Embedding,
    enc_convs: Vec<Conv1d>,
    enc_rnn: BiLstm,
    vae_convs: Vec<Conv1d>,
    vae_rnn: Gru,
    vae_proj: Linear,
    dec_in: Linear,
    dec_blocks: Vec<Conv1d>,
    dec_lstms: Vec<Lstm>,
    dec_out: Linear,
}

pub struct AcousticModel {
    pub cfg: AcousticConfig,
    pub params: ParamStore,
    net: Net,
}

/// Prefix shared by every VAE parameter name.
pub const VAE_PREFIX: &str = "vae.";

impl AcousticModel {
    pub fn new(cfg: AcousticConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let h = cfg.encoder_hidden;
        let embedding = Embedding::new(&mut s, "enc.embedding", cfg.vocab_size, h, &mut rng);
        let enc_convs = (0..cfg.encoder_convs)
            .map(|i| Conv1d::same(&mut s, &format!("enc.conv{i}"), h, h, cfg.encoder_kernel, &mut rng))
            .collect();
        let enc_rnn = BiLstm::new(&mut s, "enc.blstm", h, h / 2, &mut rng);

        let vc = cfg.vae_channels;
        let vae_convs = (0..cfg.vae_convs)
            .map(|i| {
                let inp = if i == 0 { cfg.n_mels } else { vc };
                Conv1d::same(&mut s, &format!("vae.conv{i}"), inp, vc, cfg.vae_kernel, &mut rng)
            })
            .collect();
        let rnn_in = if cfg.vae_convs == 0 { cfg.n_mels } else { vc };
        let vae_rnn = Gru::new(&mut s, "vae.gru", rnn_in, cfg.vae_rnn, &mut rng);
        let vae_proj = Linear::new(&mut s, "vae.proj", cfg.vae_rnn, 2 * cfg.latent_dim, &mut rng);

        let d = cfg.decoder_hidden;
        let dec_in = Linear::new(&mut s, "dec.in", cfg.condition_dim(), d, &mut rng);
        let dec_blocks = (0..cfg.decoder_blocks)
            .map(|i| Conv1d::same(&mut s, &format!("dec.gated{i}"), d, 2 * d, cfg.decoder_kernel, &mut rng))
            .collect();
        let mut width = d;
        let dec_lstms = (0..cfg.decoder_lstm_layers)
            .map(|i| {
                let l = Lstm::new(&mut s, &format!("dec.lstm{i}"), width, cfg.decoder_lstm_hidden, &mut rng);
                width = cfg.decoder_lstm_hidden;
                l
            })
            .collect();
        let dec_out = Linear::new(&mut s, "dec.out", width, cfg.n_mels, &mut rng);
        Ok(Self {
            cfg,
            params: s,
            net: Net {
                embedding,
                enc_convs,
                enc_rnn,
                vae_convs,
                vae_rnn,
                vae_proj,
                dec_in,
                dec_blocks,
                dec_lstms,
                dec_out,
            },
        })
    }

    /// Rebuilds the architecture for `cfg` and copies in stored values.
    pub fn from_params(cfg: AcousticConfig, stored: &ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.params.load_values_from(stored)?;
        Ok(m)
    }

    pub fn vae_param_ids(&self) -> Vec<ParamId> {
        self.params.ids_with_prefix(VAE_PREFIX).collect()
    }

    /// `x̃`: `N × encoder_hidden`.
    pub fn encode(&self, g: &mut Graph, phonemes: &PhonemeSequence) -> Result<Var> {
        if phonemes.is_empty() {
            return Err(TtsError::Validation("cannot encode an empty phoneme sequence".into()));
        }
        if let Some(&bad) = phonemes.ids().iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(TtsError::Validation(format!("phoneme id {bad} outside model vocabulary")));
        }
        let mut x = self.net.embedding.forward(g, phonemes.ids());
        for conv in &self.net.enc_convs {
            let y = conv.forward(g, x);
            let y = g.relu(y);
            x = g.dropout(y, self.cfg.dropout);
        }
        let y = self.net.enc_rnn.forward(g, x);
        Ok(g.dropout(y, self.cfg.dropout))
    }

    /// Posterior parameters `(μ, log σ)`, each `1 × latent_dim`, from the last
    /// recurrent state.
    pub fn vae_encode(&self, g: &mut Graph, mel: Var) -> (Var, Var) {
        let mut x = mel;
        for conv in &self.net.vae_convs {
            let y = conv.forward(g, x);
            x = g.relu(y);
        }
        let states = self.net.vae_rnn.forward(g, x);
        let t = g.shape(states).0;
        let last = g.slice_rows(states, t - 1, t);
        let proj = self.net.vae_proj.forward(g, last);
        let l = self.cfg.latent_dim;
        (g.slice_cols(proj, 0, l), g.slice_cols(proj, l, 2 * l))
    }

    pub fn posterior(&self, mel: &Mat) -> Result<VaePosterior> {
        if mel.ncols() != self.cfg.n_mels || mel.nrows() == 0 {
            return Err(TtsError::Shape(format!("mel {:?} for a {}-bin model", mel.dim(), self.cfg.n_mels)));
        }
        let mut g = Graph::new(&self.params);
        let m = g.constant(mel.clone());
        let (mu, ls) = self.vae_encode(&mut g, m);
        Ok(VaePosterior {
            mu: g.value(mu).iter().copied().collect(),
            log_sigma: g.value(ls).iter().copied().collect(),
        })
    }

    /// Upsampled `[x̃ ‖ z ‖ speaker ‖ synthetic one-hot]` plus positional
    /// features, `T × condition_dim`.
    pub fn condition(
        &self,
        g: &mut Graph,
        x_tilde: Var,
        z: Var,
        speaker: &[f64],
        synthetic: bool,
        durations: &DurationSequence,
    ) -> Result<Var> {
        let n = g.shape(x_tilde).0;
        if durations.len() != n {
            return Err(TtsError::Alignment(format!("{} durations for {n} phoneme embeddings", durations.len())));
        }
        if speaker.len() != self.cfg.speaker_dim {
            return Err(TtsError::Shape(format!(
                "speaker embedding of width {}, model expects {}",
                speaker.len(),
                self.cfg.speaker_dim
            )));
        }
        if durations.total() == 0 {
            return Err(TtsError::Validation("durations sum to zero frames".into()));
        }
        let zb = g.broadcast_rows(z, n);
        let spk = g.constant(Array2::from_shape_fn((n, speaker.len()), |(_, j)| speaker[j]));
        let flag = g.constant(Array2::from_shape_fn((n, 2), |(_, j)| f64::from((j == 1) == synthetic)));
        let per_phoneme = g.concat_cols(&[x_tilde, zb, spk, flag]);
        let frames = g.gather_rows(per_phoneme, durations.frame_to_phoneme());
        let pos = g.constant(positional_features(durations, self.cfg.position_dim));
        Ok(g.concat_cols(&[frames, pos]))
    }

    /// One residual gated convolution block.
    pub fn gated_block(&self, g: &mut Graph, index: usize, x: Var) -> Var {
        let d = self.cfg.decoder_hidden;
        let h = self.net.dec_blocks[index].forward(g, x);
        let f = g.slice_cols(h, 0, d);
        let gate = g.slice_cols(h, d, 2 * d);
        let f = g.tanh(f);
        let gate = g.sigmoid(gate);
        let y = g.mul(f, gate);
        let y = g.dropout(y, self.cfg.dropout);
        g.add(x, y)
    }

    pub fn decode(&self, g: &mut Graph, cond: Var) -> Var {
        let mut x = self.net.dec_in.forward(g, cond);
        for i in 0..self.net.dec_blocks.len() {
            x = self.gated_block(g, i, x);
        }
        x = self.decode_recurrent(g, x);
        self.net.dec_out.forward(g, x)
    }

    fn decode_recurrent(&self, g: &mut Graph, mut x: Var) -> Var {
        for lstm in &self.net.dec_lstms {
            let y = lstm.forward(g, x);
            x = g.dropout(y, self.cfg.dropout);
        }
        x
    }

    /// Recurrent tail plus output projection, applied to post-convolution
    /// activations.
    pub fn decode_tail(&self, g: &mut Graph, x: Var) -> Var {
        let x = self.decode_recurrent(g, x);
        self.net.dec_out.forward(g, x)
    }

    /// Training-time pass with teacher-forced `durations`. `eps` drives the
    /// reparameterised sample; `None` uses `z = μ`.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        record: &UtteranceRecord,
        speaker: &[f64],
        eps: Option<&[f64]>,
    ) -> Result<Forward> {
        self.forward_with_durations(g, record, speaker, eps, &record.durations)
    }

    pub fn forward_with_durations(
        &self,
        g: &mut Graph,
        record: &UtteranceRecord,
        speaker: &[f64],
        eps: Option<&[f64]>,
        durations: &DurationSequence,
    ) -> Result<Forward> {
        if record.mel.bins() != self.cfg.n_mels {
            return Err(TtsError::Shape(format!("{}: {} bins, model has {}", record.id, record.mel.bins(), self.cfg.n_mels)));
        }
        let target = g.constant(record.mel.data().clone());
        let x_tilde = self.encode(g, &record.phonemes)?;
        let (mu, log_sigma) = self.vae_encode(g, target);
        let z = match eps {
            Some(e) => {
                if e.len() != self.cfg.latent_dim {
                    return Err(TtsError::Shape("noise width differs from latent width".into()));
                }
                let e = g.constant(Array2::from_shape_vec((1, e.len()), e.to_vec()).expect("row"));
                let sigma = g.exp(log_sigma);
                let noise = g.mul(sigma, e);
                g.add(mu, noise)
            }
            None => mu,
        };
        let cond = self.condition(g, x_tilde, z, speaker, record.synthetic, durations)?;
        let pred = self.decode(g, cond);
        Ok(Forward {
            pred,
            target,
            mu,
            log_sigma,
            x_tilde,
        })
    }

    /// Deterministic inference for fixed durations and latent.
    pub fn infer(
        &self,
        phonemes: &PhonemeSequence,
        speaker: &[f64],
        durations: &DurationSequence,
        z: &[f64],
        synthetic: bool,
    ) -> Result<Mat> {
        if z.len() != self.cfg.latent_dim {
            return Err(TtsError::Shape(format!("latent of width {}, model expects {}", z.len(), self.cfg.latent_dim)));
        }
        let mut g = Graph::new(&self.params);
        let x = self.encode(&mut g, phonemes)?;
        let zv = g.constant(Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row"));
        let cond = self.condition(&mut g, x, zv, speaker, synthetic, durations)?;
        let out = self.decode(&mut g, cond);
        Ok(g.value(out).clone())
    }

    /// Inference-mode phoneme embeddings.
    pub fn phoneme_embeddings(&self, phonemes: &PhonemeSequence) -> Result<Mat> {
        let mut g = Graph::new(&self.params);
        let x = self.encode(&mut g, phonemes)?;
        Ok(g.value(x).clone())
    }

    /// Centroid of posterior means over ground-truth records of `speaker`.
    pub fn centroid(&self, records: &[UtteranceRecord], speaker: &str) -> Result<Vec<f64>> {
        let posts = records
            .iter()
            .filter(|r| r.speaker_id == speaker && !r.synthetic)
            .map(|r| self.posterior(r.mel.data()))
            .collect::<Result<Vec<_>>>()?;
        if posts.is_empty() {
            return Err(TtsError::Validation(format!("no ground-truth records for speaker {speaker}")));
        }
        vae_centroid(&posts)
    }
}
