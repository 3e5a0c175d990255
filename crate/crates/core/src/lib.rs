//! Low-resource expressive text-to-speech: corpus ingestion, voice-conversion
//! augmentation, a non-autoregressive acoustic model with a VAE prosody
//! latent, duration modelling, adversarial fine-tuning, staged training and
//! synthesis/evaluation.

pub mod acoustic;
pub mod adversarial;
pub mod corpus;
pub mod duration;
pub mod error;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod vc;

pub use error::{Result, TtsError};
