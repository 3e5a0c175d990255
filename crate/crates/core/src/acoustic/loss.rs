//! Training objectives and the KL annealing schedule, as plain functions over
//! values (for oracles and reporting) and as graph builders (for training).

use lrtts_nn::{Graph, Mat, Var};
use serde::{Deserialize, Serialize};

use super::VaePosterior;
use crate::error::{Result, TtsError};

/// Gaussian KL against N(0, I): `Σ 0.5·(μ² + σ² − 1 − 2 ln σ)`.
pub fn kl_divergence(post: &VaePosterior) -> f64 {
    post.mu
        .iter()
        .zip(&post.log_sigma)
        .map(|(&m, &ls)| 0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls))
        .sum()
}

/// Mean absolute error over cells.
pub fn l1_loss(pred: &Mat, target: &Mat) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(TtsError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    Ok((pred - target).mapv(f64::abs).mean().unwrap_or(0.0))
}

/// `L1 + γ·KL`.
pub fn loss_train(pred: &Mat, target: &Mat, post: &VaePosterior, gamma: f64) -> Result<f64> {
    Ok(l1_loss(pred, target)? + gamma * kl_divergence(post))
}

pub fn kl_graph(g: &mut Graph, mu: Var, log_sigma: Var) -> Var {
    let m2 = g.square(mu);
    let two_ls = g.scale(log_sigma, 2.0);
    let s2 = g.exp(two_ls);
    let a = g.add(m2, s2);
    let b = g.sub(a, two_ls);
    let c = g.add_scalar(b, -1.0);
    let total = g.sum(c);
    g.scale(total, 0.5)
}

pub fn l1_graph(g: &mut Graph, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let a = g.abs(d);
    g.mean(a)
}

/// Graph form of [`loss_train`]; returns `(total, l1, kl)`.
pub fn loss_train_graph(
    g: &mut Graph,
    pred: Var,
    target: Var,
    mu: Var,
    log_sigma: Var,
    gamma: f64,
) -> (Var, Var, Var) {
    let l1 = l1_graph(g, pred, target);
    let kl = kl_graph(g, mu, log_sigma);
    let weighted = g.scale(kl, gamma);
    (g.add(l1, weighted), l1, kl)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlSchedule {
    pub start: u64,
    pub end: u64,
    pub gamma_max: f64,
}

impl Default for KlSchedule {
    fn default() -> Self {
        Self {
            start: 1_000,
            end: 10_000,
            gamma_max: 1e-2,
        }
    }
}

/// Logistic ramp centred between `start` and `end`.
pub fn kl_anneal_weight(step: u64, s: &KlSchedule) -> f64 {
    if s.end <= s.start {
        return if step >= s.end { s.gamma_max } else { 0.0 };
    }
    let mid = (s.start + s.end) as f64 / 2.0;
    let x = 10.0 * (step as f64 - mid) / (s.end - s.start) as f64;
    (s.gamma_max * lrtts_nn::graph::sigmoid(x)).clamp(0.0, s.gamma_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn post(mu: Vec<f64>, sigma: Vec<f64>) -> VaePosterior {
        VaePosterior { mu, log_sigma: sigma.into_iter().map(f64::ln).collect() }
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_divergence(&post(vec![0.0; 4], vec![1.0; 4])), 0.0);
        assert!((kl_divergence(&post(vec![1.0], vec![1.0])) - 0.5).abs() < 1e-12);
        let e = std::f64::consts::E;
        let want = 0.5 * (e * e - 3.0);
        assert!((kl_divergence(&post(vec![0.0], vec![e])) - want).abs() < 1e-12);
        assert!((want - 2.19453).abs() < 1e-5);
    }

    #[test]
    fn train_loss_hand_value() {
        let y = array![[0.0, 1.0], [2.0, 3.0]];
        let p = &y + 1.0;
        let v = loss_train(&p, &y, &post(vec![1.0], vec![1.0]), 0.5).unwrap();
        assert!((v - 1.25).abs() < 1e-12);
        assert_eq!(loss_train(&y, &y, &post(vec![0.0], vec![1.0]), 3.0).unwrap(), 0.0);
        assert!(l1_loss(&y, &array![[1.0]]).is_err());
    }

    #[test]
    fn anneal_shape() {
        let s = KlSchedule::default();
        assert!((kl_anneal_weight(5_500, &s) - 0.005).abs() < 1e-15);
        assert!(kl_anneal_weight(s.start, &s) < 0.01 * s.gamma_max);
        assert!(kl_anneal_weight(s.end, &s) > 0.99 * s.gamma_max);
        assert!(kl_anneal_weight(0, &s) < 0.01 * s.gamma_max);
    }
}
