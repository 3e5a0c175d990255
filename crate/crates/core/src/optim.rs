//! Adam with bias correction, global-norm clipping and the warm-up/decay
//! learning-rate multiplier.

use std::collections::HashSet;

use lrtts_nn::{Grads, Mat, ParamId, ParamStore};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TtsError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay_end: u64,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_steps: 10_000,
            decay_end: 100_000,
            floor: 1e-5,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        self.base_lr * lr_at(step, self)
    }
}

/// Multiplier: linear 0.1 → 1 over warm-up, then exponential decay reaching
/// `floor` at `decay_end`, constant afterwards.
pub fn lr_at(step: u64, s: &LrSchedule) -> f64 {
    if step <= s.warmup_steps {
        if s.warmup_steps == 0 {
            return 1.0;
        }
        return 0.1 + 0.9 * step as f64 / s.warmup_steps as f64;
    }
    if step >= s.decay_end {
        return s.floor;
    }
    let frac = (step - s.warmup_steps) as f64 / (s.decay_end - s.warmup_steps) as f64;
    (s.floor.ln() * frac).exp().max(s.floor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        Self {
            cfg,
            t: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    /// Moments as a store with `m.<name>` / `v.<name>` entries.
    pub fn to_store(&self, params: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for id in params.ids() {
            let i = id.index();
            let zeros = || Mat::zeros(params.get(id).dim());
            out.add(format!("m.{}", params.name(id)), self.m[i].clone().unwrap_or_else(zeros));
            out.add(format!("v.{}", params.name(id)), self.v[i].clone().unwrap_or_else(zeros));
        }
        out
    }

    pub fn from_store(cfg: AdamConfig, t: u64, params: &ParamStore, moments: &ParamStore) -> Result<Self> {
        let mut s = Self::new(cfg, params);
        s.t = t;
        for id in params.ids() {
            for (prefix, slot) in [("m", &mut s.m), ("v", &mut s.v)] {
                let name = format!("{prefix}.{}", params.name(id));
                let mid = moments
                    .id_of(&name)
                    .ok_or_else(|| TtsError::Checkpoint(format!("optimizer state lacks {name}")))?;
                if moments.get(mid).dim() != params.get(id).dim() {
                    return Err(TtsError::Checkpoint(format!("optimizer moment {name} has the wrong shape")));
                }
                slot[id.index()] = Some(moments.get(mid).clone());
            }
        }
        Ok(s)
    }
}

/// Rescales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One Adam update at learning rate `lr`. Parameters in `frozen`, buffers and
/// parameters without a gradient are left untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
    frozen: &HashSet<ParamId>,
) -> Result<()> {
    for (id, g) in grads.iter() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TtsError::NonFiniteGradient(params.name(id).to_string()));
        }
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.cfg;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (id, g) in grads.iter() {
        if frozen.contains(&id) || !params.is_trainable(id) {
            continue;
        }
        let i = id.index();
        let m = state.m[i].get_or_insert_with(|| Mat::zeros(g.dim()));
        m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
        let v = state.v[i].get_or_insert_with(|| Mat::zeros(g.dim()));
        v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
        let (m, v) = (state.m[i].as_ref().unwrap(), state.v[i].as_ref().unwrap());
        let p = params.get_mut(id);
        ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
            *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
        });
    }
    Ok(())
}
