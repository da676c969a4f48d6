//! Normal and tanh-squashed normal policy distributions.
//!
//! Samples keep their base noise and pre-tanh value so that log-densities never
//! need `atanh` of an action close to the boundary.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// `0.5 * ln(2 * pi)`
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquashedNormalParams {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquashedSample {
    pub noise: Vec<f64>,
    pub pre_tanh: Vec<f64>,
    pub action: Vec<f64>,
}

impl SquashedNormalParams {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Self {
        assert_eq!(mean.len(), log_std.len(), "mean and log_std lengths differ");
        SquashedNormalParams { mean, log_std }
    }

    /// Splits a policy head `[mean.., raw_log_std..]` and clamps the log standard
    /// deviations. The returned mask marks lanes whose log_std was not clamped,
    /// i.e. lanes through which a gradient flows.
    pub fn from_head(head: &[f64]) -> (Self, Vec<bool>) {
        assert!(head.len() % 2 == 0, "policy head must have even length");
        let d = head.len() / 2;
        let mean = head[..d].to_vec();
        let mut open = Vec::with_capacity(d);
        let log_std = head[d..]
            .iter()
            .map(|&raw| {
                open.push((LOG_STD_MIN..=LOG_STD_MAX).contains(&raw));
                raw.clamp(LOG_STD_MIN, LOG_STD_MAX)
            })
            .collect();
        (SquashedNormalParams { mean, log_std }, open)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn sample_with_noise(&self, noise: &[f64]) -> SquashedSample {
        let pre_tanh: Vec<f64> = self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(noise)
            .map(|((m, l), xi)| m + l.exp() * xi)
            .collect();
        let action = pre_tanh.iter().map(|u| u.tanh()).collect();
        SquashedSample {
            noise: noise.to_vec(),
            pre_tanh,
            action,
        }
    }

    pub fn sample_reparam<R: Rng + ?Sized>(&self, rng: &mut R) -> SquashedSample {
        let noise: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with_noise(&noise)
    }

    /// Zero-noise action `tanh(mean)`.
    pub fn mode(&self) -> SquashedSample {
        self.sample_with_noise(&vec![0.0; self.dim()])
    }

    pub fn log_prob(&self, sample: &SquashedSample) -> f64 {
        log_prob(self, sample)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))`, finite for every finite `u`.
#[inline]
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// `d tanh(u) / du` evaluated without cancellation near saturation.
#[inline]
pub fn tanh_derivative(u: f64) -> f64 {
    log_one_minus_tanh_sq(u).exp()
}

pub fn normal_log_density(x: f64, mean: f64, log_std: f64) -> f64 {
    let z = (x - mean) * (-log_std).exp();
    -0.5 * z * z - log_std - HALF_LOG_2PI
}

/// Log-density of the squashed sample, including the tanh change of variables.
pub fn log_prob(params: &SquashedNormalParams, sample: &SquashedSample) -> f64 {
    params
        .mean
        .iter()
        .zip(&params.log_std)
        .zip(&sample.pre_tanh)
        .map(|((&m, &l), &u)| normal_log_density(u, m, l) - log_one_minus_tanh_sq(u))
        .sum()
}

/// Gradient of `log_prob` with respect to `(mean, log_std)` along the
/// reparameterized path, i.e. holding the base noise fixed.
pub fn log_prob_reparam_grad(params: &SquashedNormalParams, sample: &SquashedSample) -> (Vec<f64>, Vec<f64>) {
    // With u = m + s*xi the gaussian part is -xi^2/2 - log s, so only the
    // tanh correction depends on the mean: d/du[-ln(1 - tanh^2 u)] = 2 tanh u.
    let d_mean: Vec<f64> = sample.action.iter().map(|a| 2.0 * a).collect();
    let d_log_std = d_mean
        .iter()
        .zip(&params.log_std)
        .zip(&sample.noise)
        .map(|((dm, l), xi)| dm * l.exp() * xi - 1.0)
        .collect();
    (d_mean, d_log_std)
}

/// Pulls a gradient with respect to the action back to `(mean, log_std)`.
pub fn action_vjp(params: &SquashedNormalParams, sample: &SquashedSample, d_action: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d_mean: Vec<f64> = d_action
        .iter()
        .zip(&sample.pre_tanh)
        .map(|(g, &u)| g * tanh_derivative(u))
        .collect();
    let d_log_std = d_mean
        .iter()
        .zip(&params.log_std)
        .zip(&sample.noise)
        .map(|((dm, l), xi)| dm * l.exp() * xi)
        .collect();
    (d_mean, d_log_std)
}

/// Score function: gradient of `log_prob` with respect to `(mean, log_std)`
/// holding the pre-tanh sample fixed (likelihood-ratio estimator).
pub fn log_prob_score(params: &SquashedNormalParams, sample: &SquashedSample) -> (Vec<f64>, Vec<f64>) {
    let mut d_mean = Vec::with_capacity(params.dim());
    let mut d_log_std = Vec::with_capacity(params.dim());
    for ((&m, &l), &u) in params.mean.iter().zip(&params.log_std).zip(&sample.pre_tanh) {
        let inv_std = (-l).exp();
        let z = (u - m) * inv_std;
        d_mean.push(z * inv_std);
        d_log_std.push(z * z - 1.0);
    }
    (d_mean, d_log_std)
}

/// Closed-form entropy of the (unsquashed) diagonal normal.
pub fn normal_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|l| 0.5 + HALF_LOG_2PI + l).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Monte-Carlo estimate of the squashed distribution's entropy `E[-log pi(A)]`.
pub fn squashed_entropy_mc<R: Rng + ?Sized>(params: &SquashedNormalParams, n_samples: usize, rng: &mut R) -> Estimate {
    assert!(n_samples >= 2, "need at least two samples for a standard error");
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 1..=n_samples {
        let x = -log_prob(params, &params.sample_reparam(rng));
        let d = x - mean;
        mean += d / k as f64;
        m2 += d * (x - mean);
    }
    let var = m2 / (n_samples - 1) as f64;
    Estimate {
        mean,
        stderr: (var / n_samples as f64).sqrt(),
    }
}
