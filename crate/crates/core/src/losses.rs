//! Training objectives and their analytic derivatives.
//!
//! Every loss here comes with a matching `*_grad` so the trainer can run
//! reverse-mode differentiation by hand. Derivatives are with respect to the
//! raw inputs of each function.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Variant;

/// Smooth-L1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = x - two_pi * (x / two_pi).round();
    if r <= -PI {
        r += two_pi;
    } else if r > PI {
        r -= two_pi;
    }
    r
}

/// Gaussian negative log-likelihood of `y` under N(mu, exp(log_var)),
/// without the constant term.
pub fn dist_nll(mu: f64, log_var: f64, y: f64) -> f64 {
    let r = y - mu;
    0.5 * log_var + r * r / (2.0 * log_var.exp())
}

/// `(d/dmu, d/dlog_var)` of [`dist_nll`].
pub fn dist_nll_grad(mu: f64, log_var: f64, y: f64) -> (f64, f64) {
    let inv_var = (-log_var).exp();
    let r = y - mu;
    (-r * inv_var, 0.5 - 0.5 * r * r * inv_var)
}

pub fn dist_mse(mu: f64, y: f64) -> f64 {
    (y - mu) * (y - mu)
}

pub fn dist_mse_grad(mu: f64, y: f64) -> f64 {
    -2.0 * (y - mu)
}

pub fn smooth_l1(e: f64) -> f64 {
    let a = e.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * e * e / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

fn smooth_l1_grad(e: f64) -> f64 {
    if e.abs() < SMOOTH_L1_BETA {
        e / SMOOTH_L1_BETA
    } else {
        e.signum()
    }
}

/// Smooth-L1 on the wrapped azimuth error.
pub fn ang_loss(phi_hat: f64, y_ang: f64) -> f64 {
    smooth_l1(wrap_angle(phi_hat - y_ang))
}

/// d/dphi_hat of [`ang_loss`]; the wrap has unit slope away from its seam.
pub fn ang_loss_grad(phi_hat: f64, y_ang: f64) -> f64 {
    smooth_l1_grad(wrap_angle(phi_hat - y_ang))
}

/// Distance part of the auxiliary objective for `variant`, plus its
/// `(d/dmu, d/dlog_var)`.
pub fn dist_term(variant: Variant, mu: f64, log_var: f64, y: f64) -> (f64, f64, f64) {
    match variant {
        Variant::Baseline => (0.0, 0.0, 0.0),
        Variant::AgrMse => (dist_mse(mu, y), dist_mse_grad(mu, y), 0.0),
        Variant::AgrNll | Variant::Ravn => {
            let (gm, gl) = dist_nll_grad(mu, log_var, y);
            (dist_nll(mu, log_var, y), gm, gl)
        }
    }
}

/// PPO constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoCoefficients {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for PpoCoefficients {
    fn default() -> Self {
        PpoCoefficients {
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
        }
    }
}

/// Log-softmax of a logit vector.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn entropy(log_probs: &[f64]) -> f64 {
    -log_probs.iter().map(|lp| lp.exp() * lp).sum::<f64>()
}

/// One policy evaluation paired with the rollout statistics PPO needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample<'a> {
    pub logits: &'a [f64],
    pub value: f64,
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Per-sample clipped-surrogate terms and their logit/value derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoSampleTerms {
    /// `-min(rho A, clip(rho) A)`
    pub policy: f64,
    /// `(V - R)^2`
    pub value: f64,
    pub entropy: f64,
    pub ratio: f64,
    pub d_policy_d_logits: Vec<f64>,
    /// d(-entropy)/d logits
    pub d_neg_entropy_d_logits: Vec<f64>,
    pub d_value: f64,
}

pub fn ppo_sample(sample: &PpoSample<'_>, clip_eps: f64) -> PpoSampleTerms {
    let lp = log_softmax(sample.logits);
    let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let ratio = (lp[sample.action] - sample.old_log_prob).exp();
    let a = sample.advantage;
    let unclipped = ratio * a;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a;
    let policy = -unclipped.min(clipped);
    // The clipped branch is flat in rho; the gradient flows only when the
    // unclipped product is the active minimum.
    let clip_active = (a > 0.0 && ratio > 1.0 + clip_eps) || (a < 0.0 && ratio < 1.0 - clip_eps);
    let d_logp = if clip_active { 0.0 } else { -ratio * a };
    let d_policy_d_logits = probs
        .iter()
        .enumerate()
        .map(|(j, p)| d_logp * (f64::from(u8::from(j == sample.action)) - p))
        .collect();
    let h = entropy(&lp);
    let d_neg_entropy_d_logits = probs
        .iter()
        .zip(&lp)
        .map(|(p, l)| p * (l + h))
        .collect();
    let err = sample.value - sample.ret;
    PpoSampleTerms {
        policy,
        value: err * err,
        entropy: h,
        ratio,
        d_policy_d_logits,
        d_neg_entropy_d_logits,
        d_value: 2.0 * err,
    }
}

/// Batch PPO losses: `(l_policy, l_value, l_entropy)` with
/// `l_entropy = -mean(entropy)`.
pub fn ppo_loss(samples: &[PpoSample<'_>], clip_eps: f64) -> Result<(f64, f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Argument("empty PPO batch".into()));
    }
    let n = samples.len() as f64;
    let (mut lp, mut lv, mut le) = (0.0, 0.0, 0.0);
    for s in samples {
        let t = ppo_sample(s, clip_eps);
        lp += t.policy;
        lv += t.value;
        le -= t.entropy;
    }
    Ok((lp / n, lv / n, le / n))
}

/// All loss terms of one update step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_dist: f64,
    pub l_ang: f64,
    pub l_aux: f64,
    pub l_ppo_policy: f64,
    pub l_value: f64,
    pub l_entropy: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l_dist,
            self.l_ang,
            self.l_aux,
            self.l_ppo_policy,
            self.l_value,
            self.l_entropy,
            self.l_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            l_dist: self.l_dist * k,
            l_ang: self.l_ang * k,
            l_aux: self.l_aux * k,
            l_ppo_policy: self.l_ppo_policy * k,
            l_value: self.l_value * k,
            l_entropy: self.l_entropy * k,
            l_total: self.l_total * k,
        }
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.l_dist += other.l_dist;
        self.l_ang += other.l_ang;
        self.l_aux += other.l_aux;
        self.l_ppo_policy += other.l_ppo_policy;
        self.l_value += other.l_value;
        self.l_entropy += other.l_entropy;
        self.l_total += other.l_total;
    }
}

/// Combines already-averaged terms into the total objective. For the
/// baseline variant the auxiliary inputs are ignored.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    variant: Variant,
    l_policy: f64,
    l_value: f64,
    l_entropy: f64,
    l_dist: f64,
    l_ang: f64,
    lambda_aux: f64,
    coef: &PpoCoefficients,
) -> LossBreakdown {
    let (l_dist, l_ang) = if variant.has_agr() {
        (l_dist, l_ang)
    } else {
        (0.0, 0.0)
    };
    let l_aux = l_dist + l_ang;
    LossBreakdown {
        l_dist,
        l_ang,
        l_aux,
        l_ppo_policy: l_policy,
        l_value,
        l_entropy,
        l_total: l_policy + coef.value_coef * l_value + coef.entropy_coef * l_entropy
            + lambda_aux * l_aux,
    }
}
