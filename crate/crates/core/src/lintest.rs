//! Small fully-known MDPs for checking the reparameterization policy gradient
//! with a linear compatible critic (RPG-TD).
//!
//! States are discrete, actions are scalar, and the policy is
//! `f_theta(s, eps) = theta_s + sigma0 * eps` with `eps ~ N(0, 1)`. Transitions
//! follow `P(s'|s, a) = softmax_{s'}(B[s][s'] + C[s][s'] * a)` and the reward is
//! a bounded Gaussian bump `r(s, a) = h_s * exp(-(a - c_s)^2 / (2 w^2))`.
//!
//! Every expectation over `eps` is a Gauss-Hermite quadrature, so values,
//! gradients and the critic's TD fixed point are exact up to quadrature and
//! linear-solve rounding. The critic features are
//! `phi(s, a) = [e_s * (a - theta_s); e_s]`: the first block is compatible with
//! the policy (its action gradient is `grad_theta f^T w`), the second carries
//! state values.

use std::io::Write;
use std::path::Path;

use gauss_quad::hermite::GaussHermite;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const QUADRATURE_ORDER: usize = 64;
/// Lower order used to confirm the quadrature has converged.
pub const QUADRATURE_CHECK_ORDER: usize = 48;
pub const STATIONARY_TOL: f64 = 1e-12;
pub const STATIONARY_MAX_ITERS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LintestError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("the chain under this policy is not ergodic: {0}")]
    NonErgodic(String),
    #[error("singular linear system: {0}")]
    Singular(String),
    #[error("quadrature did not converge (order {low} and {high} differ by {diff:e}); raise the quadrature order or narrow the reward bumps")]
    Quadrature { low: usize, high: usize, diff: f64 },
    #[error("invalid RPG-TD config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

/// Expectations under `N(0, 1)` as weighted sums over fixed nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalQuadrature {
    pub points: Vec<(f64, f64)>,
}

impl NormalQuadrature {
    pub fn new(order: usize) -> Self {
        let rule = GaussHermite::new(order).expect("order is at least 2");
        let scale = std::f64::consts::PI.sqrt();
        let points = rule
            .into_node_weight_pairs()
            .into_iter()
            .map(|(x, w)| (std::f64::consts::SQRT_2 * x, w / scale))
            .collect();
        NormalQuadrature { points }
    }

    pub fn expect(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.points.iter().map(|&(e, w)| w * f(e)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmallMdp {
    pub gamma: f64,
    /// Policy noise scale.
    pub sigma0: f64,
    /// Transition logit offsets `B[s][s']`.
    pub logit_base: Vec<Vec<f64>>,
    /// Transition logit slopes in the action `C[s][s']`.
    pub logit_slope: Vec<Vec<f64>>,
    pub reward_height: Vec<f64>,
    pub reward_center: Vec<f64>,
    pub reward_width: f64,
    pub initial: Vec<f64>,
}

impl Default for SmallMdp {
    fn default() -> Self {
        SmallMdp::three_state()
    }
}

impl SmallMdp {
    /// The 3-state instance used by the test suite.
    pub fn three_state() -> Self {
        SmallMdp {
            gamma: 0.9,
            sigma0: 0.5,
            logit_base: vec![vec![0.5, 0.0, -0.5], vec![0.0, 0.3, 0.0], vec![-0.2, 0.4, 0.1]],
            logit_slope: vec![vec![-1.0, 0.5, 1.0], vec![0.8, -0.6, 0.2], vec![0.3, 0.9, -1.2]],
            reward_height: vec![1.0, 0.5, 2.0],
            reward_center: vec![0.5, -1.0, 1.5],
            reward_width: 1.0,
            initial: vec![1.0, 0.0, 0.0],
        }
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn validate(&self) -> Result<(), LintestError> {
        let n = self.n_states();
        let bad = |m: &str| Err(LintestError::InvalidMdp(m.into()));
        if n == 0 || n > 10 {
            return bad("between 1 and 10 states are supported");
        }
        let square = |m: &Vec<Vec<f64>>| m.len() == n && m.iter().all(|r| r.len() == n && r.iter().all(|v| v.is_finite()));
        if !square(&self.logit_base) || !square(&self.logit_slope) {
            return bad("transition logits must be finite n x n matrices");
        }
        if self.reward_height.len() != n || self.reward_center.len() != n {
            return bad("reward parameters need one entry per state");
        }
        if !(self.reward_width > 0.0 && self.sigma0 > 0.0) {
            return bad("reward_width and sigma0 must be positive");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if self.initial.iter().any(|p| *p < 0.0) || (self.initial.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return bad("initial distribution must be a probability vector");
        }
        Ok(())
    }

    /// Upper bound on `|r(s, a)|`.
    pub fn reward_max(&self) -> f64 {
        self.reward_height.iter().fold(0.0f64, |m, h| m.max(h.abs()))
    }

    pub fn reward(&self, s: usize, a: f64) -> f64 {
        let z = (a - self.reward_center[s]) / self.reward_width;
        self.reward_height[s] * (-0.5 * z * z).exp()
    }

    pub fn reward_da(&self, s: usize, a: f64) -> f64 {
        let w2 = self.reward_width * self.reward_width;
        -self.reward(s, a) * (a - self.reward_center[s]) / w2
    }

    pub fn transition(&self, s: usize, a: f64) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.n_states())
            .map(|k| self.logit_base[s][k] + self.logit_slope[s][k] * a)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    pub fn transition_da(&self, s: usize, a: f64) -> Vec<f64> {
        let p = self.transition(s, a);
        let mean_slope: f64 = p.iter().zip(&self.logit_slope[s]).map(|(p, c)| p * c).sum();
        p.iter()
            .zip(&self.logit_slope[s])
            .map(|(p, c)| p * (c - mean_slope))
            .collect()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), LintestError> {
        if theta.len() != self.n_states() || theta.iter().any(|t| !t.is_finite()) {
            return Err(LintestError::InvalidMdp(format!(
                "theta must hold {} finite values",
                self.n_states()
            )));
        }
        Ok(())
    }

    /// State-to-state kernel and expected reward under the policy.
    pub fn policy_kernel(&self, theta: &[f64], quad: &NormalQuadrature) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n_states();
        let mut p = DMatrix::zeros(n, n);
        let mut r = DVector::zeros(n);
        for s in 0..n {
            for &(e, w) in &quad.points {
                let a = theta[s] + self.sigma0 * e;
                for (k, pk) in self.transition(s, a).into_iter().enumerate() {
                    p[(s, k)] += w * pk;
                }
                r[s] += w * self.reward(s, a);
            }
        }
        (p, r)
    }

    pub fn state_values(&self, theta: &[f64], quad: &NormalQuadrature) -> Result<DVector<f64>, LintestError> {
        self.check_theta(theta)?;
        let (p, r) = self.policy_kernel(theta, quad);
        let n = self.n_states();
        let m = DMatrix::identity(n, n) - p * self.gamma;
        m.lu()
            .solve(&r)
            .ok_or_else(|| LintestError::Singular("I - gamma P".into()))
    }

    /// `J(theta) = sum_s d0(s) V(s)`.
    pub fn objective(&self, theta: &[f64], quad: &NormalQuadrature) -> Result<f64, LintestError> {
        let v = self.state_values(theta, quad)?;
        Ok(self.initial.iter().zip(v.iter()).map(|(d, v)| d * v).sum())
    }

    /// Discounted visitation `nu = d0^T (I - gamma P)^{-1}`; sums to `1 / (1 - gamma)`.
    pub fn discounted_visitation(&self, theta: &[f64], quad: &NormalQuadrature) -> Result<Vec<f64>, LintestError> {
        self.check_theta(theta)?;
        let (p, _) = self.policy_kernel(theta, quad);
        let n = self.n_states();
        let m = (DMatrix::identity(n, n) - p * self.gamma).transpose();
        let d0 = DVector::from_column_slice(&self.initial);
        let nu = m
            .lu()
            .solve(&d0)
            .ok_or_else(|| LintestError::Singular("(I - gamma P)^T".into()))?;
        Ok(nu.iter().copied().collect())
    }

    pub fn stationary_distribution(&self, theta: &[f64], quad: &NormalQuadrature) -> Result<Vec<f64>, LintestError> {
        self.check_theta(theta)?;
        let (p, _) = self.policy_kernel(theta, quad);
        let rows: Vec<Vec<f64>> = (0..self.n_states()).map(|s| p.row(s).iter().copied().collect()).collect();
        stationary_distribution_of(&rows)
    }

    /// `d/da Q(s, a)` with `Q(s, a) = r(s, a) + gamma sum_s' P(s'|s, a) V(s')`.
    pub fn q_action_gradient(&self, s: usize, a: f64, values: &DVector<f64>) -> f64 {
        let dp = self.transition_da(s, a);
        self.reward_da(s, a) + self.gamma * dp.iter().zip(values.iter()).map(|(d, v)| d * v).sum::<f64>()
    }

    pub fn q_value(&self, s: usize, a: f64, values: &DVector<f64>) -> f64 {
        let p = self.transition(s, a);
        self.reward(s, a) + self.gamma * p.iter().zip(values.iter()).map(|(p, v)| p * v).sum::<f64>()
    }

    /// Per-state `E_eps[dQ/da]` at the policy's actions.
    pub fn mean_action_gradient(&self, theta: &[f64], quad: &NormalQuadrature) -> Result<Vec<f64>, LintestError> {
        let v = self.state_values(theta, quad)?;
        Ok((0..self.n_states())
            .map(|s| quad.expect(|e| self.q_action_gradient(s, theta[s] + self.sigma0 * e, &v)))
            .collect())
    }

    /// `grad J(theta)_s = nu(s) E_eps[dQ/da(s, theta_s + sigma0 eps)]`, checked against
    /// a lower-order quadrature.
    pub fn brute_force_policy_gradient(&self, theta: &[f64]) -> Result<Vec<f64>, LintestError> {
        let high = self.policy_gradient_with(theta, &NormalQuadrature::new(QUADRATURE_ORDER))?;
        let low = self.policy_gradient_with(theta, &NormalQuadrature::new(QUADRATURE_CHECK_ORDER))?;
        let diff = high.iter().zip(&low).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = 1.0 + high.iter().map(|g| g.abs()).fold(0.0, f64::max);
        if diff > 1e-10 * scale {
            return Err(LintestError::Quadrature {
                low: QUADRATURE_CHECK_ORDER,
                high: QUADRATURE_ORDER,
                diff,
            });
        }
        Ok(high)
    }

    pub fn policy_gradient_with(&self, theta: &[f64], quad: &NormalQuadrature) -> Result<Vec<f64>, LintestError> {
        let nu = self.discounted_visitation(theta, quad)?;
        let g = self.mean_action_gradient(theta, quad)?;
        Ok(nu.iter().zip(&g).map(|(n, g)| n * g).collect())
    }

    /// Critic features `[e_s (a - theta_s); e_s]`.
    pub fn features(&self, theta: &[f64], s: usize, a: f64) -> Vec<f64> {
        let n = self.n_states();
        let mut phi = vec![0.0; 2 * n];
        phi[s] = a - theta[s];
        phi[n + s] = 1.0;
        phi
    }

    /// Exact `A = E_d[phi (gamma phi' - phi)^T]` and `b = E_d[r phi]` under the
    /// stationary distribution.
    pub fn td_system(&self, theta: &[f64], quad: &NormalQuadrature) -> Result<(DMatrix<f64>, DVector<f64>), LintestError> {
        let d = self.stationary_distribution(theta, quad)?;
        let n = self.n_states();
        let dim = 2 * n;
        let mean_next_phi: Vec<DVector<f64>> = (0..n)
            .map(|s2| {
                let mut m = DVector::zeros(dim);
                for &(e, w) in &quad.points {
                    m += DVector::from_vec(self.features(theta, s2, theta[s2] + self.sigma0 * e)) * w;
                }
                m
            })
            .collect();
        let mut a_mat = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        for s in 0..n {
            for &(e, w) in &quad.points {
                let a = theta[s] + self.sigma0 * e;
                let phi = DVector::from_vec(self.features(theta, s, a));
                let p = self.transition(s, a);
                let mut next = DVector::zeros(dim);
                for (s2, p2) in p.iter().enumerate() {
                    next += &mean_next_phi[s2] * *p2;
                }
                let weight = d[s] * w;
                a_mat += &phi * (next * self.gamma - &phi).transpose() * weight;
                b += &phi * (self.reward(s, a) * weight);
            }
        }
        Ok((a_mat, b))
    }

    /// TD fixed point `w*` solving `A w* + b = 0`.
    pub fn td_fixed_point(&self, theta: &[f64], quad: &NormalQuadrature) -> Result<Vec<f64>, LintestError> {
        let (a, b) = self.td_system(theta, quad)?;
        let min_abs_pivot = a.clone().lu().u().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if !(min_abs_pivot > 1e-12) {
            return Err(LintestError::Singular(format!(
                "TD matrix A has a pivot of {min_abs_pivot:e}; every state needs stationary mass"
            )));
        }
        let w = a
            .lu()
            .solve(&(-b))
            .ok_or_else(|| LintestError::Singular("TD matrix A".into()))?;
        Ok(w.iter().copied().collect())
    }

    /// Compatible weights `w*_xi`: the minimizer over the compatible block of
    /// `E_{nu, eps}[(grad_theta f^T w - dQ/da)^2]`, i.e. `E_eps[dQ/da]` per state.
    pub fn compatible_weights(&self, theta: &[f64], quad: &NormalQuadrature) -> Result<Vec<f64>, LintestError> {
        self.mean_action_gradient(theta, quad)
    }
}

/// Fixed point of a row-stochastic matrix by power iteration from state 0.
/// A chain that keeps oscillating is reported as non-ergodic.
pub fn stationary_distribution_of(p: &[Vec<f64>]) -> Result<Vec<f64>, LintestError> {
    let n = p.len();
    if n == 0 || p.iter().any(|r| r.len() != n) {
        return Err(LintestError::InvalidMdp("transition matrix must be square".into()));
    }
    for (s, row) in p.iter().enumerate() {
        if row.iter().any(|v| *v < 0.0 || !v.is_finite()) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(LintestError::InvalidMdp(format!("row {s} is not a probability vector")));
        }
    }
    let step = |d: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (s, ds) in d.iter().enumerate() {
            for (k, pk) in p[s].iter().enumerate() {
                out[k] += ds * pk;
            }
        }
        let z: f64 = out.iter().sum();
        out.iter().map(|v| v / z).collect()
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let mut d = vec![0.0; n];
    d[0] = 1.0;
    for _ in 0..STATIONARY_MAX_ITERS {
        let next = step(&d);
        if dist(&next, &d) <= STATIONARY_TOL {
            return Ok(next);
        }
        d = next;
    }
    let d2 = step(&step(&d));
    if dist(&d2, &d) <= STATIONARY_TOL {
        Err(LintestError::NonErgodic("the distribution oscillates with a period greater than one".into()))
    } else {
        Err(LintestError::NonErgodic(format!(
            "no fixed point after {STATIONARY_MAX_ITERS} iterations"
        )))
    }
}

/// How the critic moves each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticUpdate {
    /// `M` sampled transitions, as in the algorithm.
    Sampled,
    /// The exact expected update `w += alpha_w (A w + b)`.
    Expected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpgTdConfig {
    pub alpha_w: f64,
    pub alpha_theta: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub theta0: Vec<f64>,
    /// Initial critic weights; empty means zeros.
    pub w0: Vec<f64>,
    pub critic_update: CriticUpdate,
}

impl Default for RpgTdConfig {
    fn default() -> Self {
        RpgTdConfig {
            alpha_w: 0.5,
            alpha_theta: 0.05,
            batch_size: 8,
            iterations: 2000,
            seed: 0,
            theta0: vec![0.0; 3],
            w0: Vec::new(),
            critic_update: CriticUpdate::Sampled,
        }
    }
}

impl RpgTdConfig {
    pub fn validate(&self, mdp: &SmallMdp) -> Result<(), LintestError> {
        let bad = |m: &str| Err(LintestError::Config(m.into()));
        if !(self.alpha_w > 0.0) || !(self.alpha_theta >= 0.0) {
            return bad("alpha_w must be positive and alpha_theta non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.theta0.len() != mdp.n_states() {
            return bad("theta0 needs one entry per state");
        }
        if !self.w0.is_empty() && self.w0.len() != 2 * mdp.n_states() {
            return bad("w0 needs 2 * n_states entries");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpgTdState {
    pub theta: Vec<f64>,
    pub w: Vec<f64>,
    pub t: usize,
    pub rng: ChaCha8Rng,
}

impl RpgTdState {
    pub fn new(mdp: &SmallMdp, config: &RpgTdConfig) -> Self {
        let w = if config.w0.is_empty() {
            vec![0.0; 2 * mdp.n_states()]
        } else {
            config.w0.clone()
        };
        RpgTdState {
            theta: config.theta0.clone(),
            w,
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        }
    }
}

/// Diagnostics at `(theta_t, w_t)`, before the update of iteration `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub t: usize,
    pub grad_norm_sq: f64,
    /// `||w_t - w*_{theta_t}||`.
    pub tracking_err: f64,
}

/// Samples a state from an unnormalized non-negative measure.
fn sample_state<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize, LintestError> {
    let dist = WeightedIndex::new(weights).map_err(|e| LintestError::InvalidMdp(format!("state distribution: {e}")))?;
    Ok(dist.sample(rng))
}

fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One actor update sample `grad_theta f(s', eps') grad_theta f(s', eps')^T w` with
/// `s'` drawn from the visitation measure `nu` (normalized internally).
pub fn sample_actor_update<R: Rng + ?Sized>(
    mdp: &SmallMdp,
    nu: &[f64],
    w: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>, LintestError> {
    let n = mdp.n_states();
    let s = sample_state(nu, rng)?;
    // grad_theta f = e_s for every eps, so the noise draw only keeps the stream aligned
    let _eps: f64 = StandardNormal.sample(rng);
    let mut h = vec![0.0; n];
    h[s] = w[s];
    Ok(h)
}

/// One coupled critic/actor step. The actor samples states from the
/// normalized discounted visitation `(1 - gamma) nu`.
pub fn rpg_td_iteration(
    state: &mut RpgTdState,
    mdp: &SmallMdp,
    config: &RpgTdConfig,
    quad: &NormalQuadrature,
) -> Result<IterationDiagnostics, LintestError> {
    let n = mdp.n_states();
    let theta = state.theta.clone();
    let grad = mdp.policy_gradient_with(&theta, quad)?;
    let w_star = mdp.td_fixed_point(&theta, quad)?;
    let diag = IterationDiagnostics {
        t: state.t,
        grad_norm_sq: dot(&grad, &grad),
        tracking_err: state.w.iter().zip(&w_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
    };

    let m = config.batch_size as f64;
    let mut w_step = vec![0.0; 2 * n];
    match config.critic_update {
        CriticUpdate::Sampled => {
            let d = mdp.stationary_distribution(&theta, quad)?;
            for _ in 0..config.batch_size {
                let s = sample_state(&d, &mut state.rng)?;
                let e: f64 = StandardNormal.sample(&mut state.rng);
                let a = theta[s] + mdp.sigma0 * e;
                let s2 = sample_categorical(&mdp.transition(s, a), &mut state.rng);
                let e2: f64 = StandardNormal.sample(&mut state.rng);
                let a2 = theta[s2] + mdp.sigma0 * e2;
                let phi = mdp.features(&theta, s, a);
                let phi2 = mdp.features(&theta, s2, a2);
                let delta = mdp.reward(s, a) + mdp.gamma * dot(&phi2, &state.w) - dot(&phi, &state.w);
                for (acc, f) in w_step.iter_mut().zip(&phi) {
                    *acc += delta * f / m;
                }
            }
        }
        CriticUpdate::Expected => {
            let (a, b) = mdp.td_system(&theta, quad)?;
            let dir = a * DVector::from_column_slice(&state.w) + b;
            w_step.copy_from_slice(dir.as_slice());
        }
    }

    let mut theta_step = vec![0.0; n];
    if config.alpha_theta > 0.0 {
        let nu = mdp.discounted_visitation(&theta, quad)?;
        for _ in 0..config.batch_size {
            let h = sample_actor_update(mdp, &nu, &state.w, &mut state.rng)?;
            for (acc, v) in theta_step.iter_mut().zip(&h) {
                *acc += v / m;
            }
        }
    }

    for (w, dw) in state.w.iter_mut().zip(&w_step) {
        *w += config.alpha_w * dw;
    }
    for (t, dt) in state.theta.iter_mut().zip(&theta_step) {
        *t += config.alpha_theta * dt;
    }
    if state.w.iter().chain(&state.theta).any(|v| !v.is_finite()) {
        return Err(LintestError::Config("iterates became non-finite; reduce the step sizes".into()));
    }
    state.t += 1;
    Ok(diag)
}

/// Runs `config.iterations` iterations and returns diagnostics for
/// `t = 0..=iterations` (the last row describes the final iterate).
pub fn run_rpg_td(mdp: &SmallMdp, config: &RpgTdConfig) -> Result<(RpgTdState, Vec<IterationDiagnostics>), LintestError> {
    mdp.validate()?;
    config.validate(mdp)?;
    let quad = NormalQuadrature::new(QUADRATURE_ORDER);
    let mut state = RpgTdState::new(mdp, config);
    let mut rows = Vec::with_capacity(config.iterations + 1);
    for _ in 0..config.iterations {
        rows.push(rpg_td_iteration(&mut state, mdp, config, &quad)?);
    }
    let grad = mdp.policy_gradient_with(&state.theta, &quad)?;
    let w_star = mdp.td_fixed_point(&state.theta, &quad)?;
    rows.push(IterationDiagnostics {
        t: state.t,
        grad_norm_sq: dot(&grad, &grad),
        tracking_err: state.w.iter().zip(&w_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
    });
    Ok((state, rows))
}

/// Running minimum of `||grad J||^2` over the diagnostics.
pub fn min_grad_norm_sq(rows: &[IterationDiagnostics]) -> f64 {
    rows.iter().map(|r| r.grad_norm_sq).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Serialize)]
struct CsvRow {
    t: usize,
    grad_norm_sq: f64,
    tracking_err: f64,
    #[serde(rename = "M")]
    batch_size: usize,
    seed: u64,
}

/// Writes `(t, grad_norm_sq, tracking_err, M, seed)` rows for several runs.
pub fn write_csv<W: Write>(out: W, runs: &[(&RpgTdConfig, &[IterationDiagnostics])]) -> Result<(), LintestError> {
    let mut w = csv::Writer::from_writer(out);
    for (config, rows) in runs {
        for r in rows.iter() {
            w.serialize(CsvRow {
                t: r.t,
                grad_norm_sq: r.grad_norm_sq,
                tracking_err: r.tracking_err,
                batch_size: config.batch_size,
                seed: config.seed,
            })
            .map_err(|e| LintestError::Io(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| LintestError::Io(e.to_string()))
}

pub fn write_csv_file(path: &Path, runs: &[(&RpgTdConfig, &[IterationDiagnostics])]) -> Result<(), LintestError> {
    let file = std::fs::File::create(path).map_err(|e| LintestError::Io(format!("{}: {e}", path.display())))?;
    write_csv(std::io::BufWriter::new(file), runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> NormalQuadrature {
        NormalQuadrature::new(QUADRATURE_ORDER)
    }

    #[test]
    fn quadrature_moments() {
        let q = quad();
        assert!((q.expect(|_| 1.0) - 1.0).abs() < 1e-13);
        assert!(q.expect(|e| e).abs() < 1e-13);
        assert!((q.expect(|e| e * e) - 1.0).abs() < 1e-12);
        assert!((q.expect(|e| e.powi(4)) - 3.0).abs() < 1e-11);
    }

    #[test]
    fn two_state_symmetric_chain() {
        let d = stationary_distribution_of(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn absorbing_state_takes_all_mass() {
        let d = stationary_distribution_of(&[vec![1.0, 0.0], vec![0.3, 0.7]]).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn periodic_chain_is_rejected() {
        let err = stationary_distribution_of(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap_err();
        assert!(matches!(err, LintestError::NonErgodic(_)));
    }

    #[test]
    fn transition_rows_sum_to_one() {
        let mdp = SmallMdp::three_state();
        for s in 0..3 {
            for a in [-5.0, -0.3, 0.0, 2.0, 40.0] {
                assert!((mdp.transition(s, a).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(mdp.transition_da(s, a).iter().sum::<f64>().abs() < 1e-12);
            }
        }
        let (p, _) = mdp.policy_kernel(&[0.1, -0.2, 0.4], &quad());
        for s in 0..3 {
            assert!((p.row(s).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn visitation_mass() {
        let mdp = SmallMdp::three_state();
        let nu = mdp.discounted_visitation(&[0.0, 0.5, -0.5], &quad()).unwrap();
        assert!((nu.iter().sum::<f64>() - 1.0 / (1.0 - mdp.gamma)).abs() < 1e-12);
    }

    #[test]
    fn action_independent_reward_and_transitions_give_zero_gradient() {
        let mut mdp = SmallMdp::three_state();
        mdp.reward_width = 1e12;
        mdp.logit_slope = vec![vec![0.0; 3]; 3];
        let g = mdp.brute_force_policy_gradient(&[0.2, 0.1, -0.3]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12), "{g:?}");
    }

    #[test]
    fn gradient_scales_with_reward() {
        let mdp = SmallMdp::three_state();
        let mut scaled = mdp.clone();
        scaled.reward_height.iter_mut().for_each(|h| *h *= 3.5);
        let theta = [0.3, -0.7, 0.9];
        let g = mdp.brute_force_policy_gradient(&theta).unwrap();
        let gs = scaled.brute_force_policy_gradient(&theta).unwrap();
        for (a, b) in g.iter().zip(&gs) {
            assert!((3.5 * a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn td_fixed_point_zeroes_expected_update_and_matches_compatible_weights() {
        let mdp = SmallMdp::three_state();
        let q = quad();
        let theta = [0.4, -0.2, 1.0];
        let w = mdp.td_fixed_point(&theta, &q).unwrap();
        let (a, b) = mdp.td_system(&theta, &q).unwrap();
        let residual = a * DVector::from_column_slice(&w) + b;
        assert!(residual.amax() < 1e-12);
        let v = mdp.state_values(&theta, &q).unwrap();
        for s in 0..3 {
            assert!((w[3 + s] - v[s]).abs() < 1e-9);
        }
        let xi = mdp.compatible_weights(&theta, &q).unwrap();
        for s in 0..3 {
            assert!((w[s] - xi[s]).abs() < 1e-9, "kappa component {s}: {} vs {}", w[s], xi[s]);
        }
    }

    #[test]
    fn alpha_theta_zero_keeps_policy() {
        let mdp = SmallMdp::three_state();
        let cfg = RpgTdConfig {
            alpha_theta: 0.0,
            iterations: 20,
            theta0: vec![0.1, 0.2, 0.3],
            ..RpgTdConfig::default()
        };
        let (state, rows) = run_rpg_td(&mdp, &cfg).unwrap();
        assert_eq!(state.theta, cfg.theta0);
        assert_eq!(rows.len(), 21);
    }

    #[test]
    fn csv_has_expected_columns() {
        let cfg = RpgTdConfig::default();
        let rows = [IterationDiagnostics {
            t: 0,
            grad_norm_sq: 1.5,
            tracking_err: 0.25,
        }];
        let mut out = Vec::new();
        write_csv(&mut out, &[(&cfg, &rows)]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "t,grad_norm_sq,tracking_err,M,seed\n0,1.5,0.25,8,0\n");
    }
}
