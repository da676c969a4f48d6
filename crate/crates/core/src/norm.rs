//! Online normalization with Welford's running statistics, and TD-error scaling
//! by `sigma_delta = sqrt(Var[R] + E[G^2] Var[gamma])`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Added to the standard deviation in z-score mode.
pub const ZSCORE_EPS: f64 = 1e-8;
/// Lower bound applied to `sigma_delta` once it is estimated from data.
pub const SIGMA_DELTA_FLOOR: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormError {
    #[error("non-finite value {value} at lane {lane}")]
    NonFinite { lane: usize, value: f64 },
    #[error("expected {expected} lanes, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// How the centred value is scaled after a Welford update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// `(x - mean) / (sqrt(var) + 1e-8)`.
    #[default]
    ZScore,
    /// `(x - mean) / var`, the literal Normalize routine. Produces NaN while the
    /// variance is still zero.
    LiteralPseudocode,
}

/// Welford state, one lane per vector component.
///
/// Each lane runs the recurrence on `x - shift`, where `shift` is the lane's
/// first sample, so large common offsets cancel exactly before accumulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStat {
    pub n: u64,
    pub shift: Vec<f64>,
    /// Mean of the shifted samples; see [`RunningStat::mean`].
    pub shifted_mean: Vec<f64>,
    pub m2: Vec<f64>,
    #[serde(default)]
    pub mode: NormMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub x_norm: Vec<f64>,
    /// Population variance `m2 / n` after the update.
    pub variance: Vec<f64>,
}

impl RunningStat {
    pub fn new(dim: usize) -> Self {
        RunningStat {
            n: 0,
            shift: vec![0.0; dim],
            shifted_mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            mode: NormMode::ZScore,
        }
    }

    pub fn scalar() -> Self {
        Self::new(1)
    }

    pub fn with_mode(mut self, mode: NormMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn dim(&self) -> usize {
        self.m2.len()
    }

    /// Running mean per lane; zero before the first sample.
    pub fn mean(&self) -> Vec<f64> {
        self.shift.iter().zip(&self.shifted_mean).map(|(k, m)| k + m).collect()
    }

    /// Population variance per lane; zero before the first sample.
    pub fn variance(&self) -> Vec<f64> {
        if self.n == 0 {
            return vec![0.0; self.dim()];
        }
        let n = self.n as f64;
        self.m2.iter().map(|m| m / n).collect()
    }

    pub fn update(&mut self, x: &[f64]) -> Result<Normalized, NormError> {
        if x.len() != self.dim() {
            return Err(NormError::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if let Some((lane, &value)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(NormError::NonFinite { lane, value });
        }
        if self.n == 0 {
            self.shift.copy_from_slice(x);
        }
        self.n += 1;
        let n = self.n as f64;
        let mut x_norm = Vec::with_capacity(x.len());
        let mut variance = Vec::with_capacity(x.len());
        let lanes = self.shifted_mean.iter_mut().zip(self.m2.iter_mut()).zip(&self.shift);
        for (&xi, ((mean, m2), &shift)) in x.iter().zip(lanes) {
            let xs = xi - shift;
            let delta = xs - *mean;
            *mean += delta / n;
            let delta2 = xs - *mean;
            *m2 += delta * delta2;
            let var = *m2 / n;
            x_norm.push(match self.mode {
                NormMode::ZScore => delta2 / (var.sqrt() + ZSCORE_EPS),
                NormMode::LiteralPseudocode => delta2 / var,
            });
            variance.push(var);
        }
        Ok(Normalized { x_norm, variance })
    }

    pub fn update_scalar(&mut self, x: f64) -> Result<(f64, f64), NormError> {
        let out = self.update(&[x])?;
        Ok((out.x_norm[0], out.variance[0]))
    }

    /// Normalizes with the current statistics without updating them.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        let var = self.variance();
        x.iter()
            .zip(self.shift.iter().zip(&self.shifted_mean))
            .zip(&var)
            .map(|((xi, (k, m)), v)| {
                let centred = (xi - k) - m;
                match self.mode {
                    NormMode::ZScore => centred / (v.sqrt() + ZSCORE_EPS),
                    NormMode::LiteralPseudocode => centred / v,
                }
            })
            .collect()
    }

    pub fn mean_scalar(&self) -> f64 {
        self.shift[0] + self.shifted_mean[0]
    }

    pub fn variance_scalar(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2[0] / self.n as f64
        }
    }
}

/// Running statistics behind TD-error scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdScaleState {
    pub stat_reward: RunningStat,
    pub stat_gamma: RunningStat,
    /// Statistics of squared episode returns.
    pub stat_return_sq: RunningStat,
    pub episode_return: f64,
    pub sigma_delta: f64,
}

impl Default for TdScaleState {
    fn default() -> Self {
        TdScaleState {
            stat_reward: RunningStat::scalar(),
            stat_gamma: RunningStat::scalar(),
            stat_return_sq: RunningStat::scalar(),
            episode_return: 0.0,
            sigma_delta: 1.0,
        }
    }
}

impl TdScaleState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One call of the scaling routine: feeds `reward` and `gamma_step`, plus
    /// `G^2` when an episode return is supplied, and recomputes `sigma_delta`.
    pub fn update(&mut self, reward: f64, gamma_step: f64, episode_return: Option<f64>) -> Result<f64, NormError> {
        for v in [Some(reward), Some(gamma_step), episode_return].into_iter().flatten() {
            if !v.is_finite() {
                return Err(NormError::NonFinite { lane: 0, value: v });
            }
        }
        self.stat_reward.update_scalar(reward)?;
        self.stat_gamma.update_scalar(gamma_step)?;
        if let Some(g) = episode_return {
            self.stat_return_sq.update_scalar(g * g)?;
        }
        self.sigma_delta = self.current_sigma();
        Ok(self.sigma_delta)
    }

    fn current_sigma(&self) -> f64 {
        if self.stat_return_sq.n <= 1 {
            return 1.0;
        }
        let var_r = self.stat_reward.variance_scalar();
        let var_gamma = self.stat_gamma.variance_scalar();
        let mean_g2 = self.stat_return_sq.mean_scalar();
        (var_r + mean_g2 * var_gamma).sqrt().max(SIGMA_DELTA_FLOOR)
    }

    pub fn accumulate_reward(&mut self, reward: f64) {
        self.episode_return += reward;
    }

    /// End-of-episode call: `(reward, 0, G)`, then `G` restarts at zero.
    pub fn finish_episode(&mut self, last_reward: f64) -> Result<f64, NormError> {
        let g = self.episode_return;
        self.episode_return = 0.0;
        self.update(last_reward, 0.0, Some(g))
    }

    pub fn reset_return(&mut self) {
        self.episode_return = 0.0;
    }
}

#[inline]
pub fn scale(delta: f64, sigma_delta: f64) -> f64 {
    delta / sigma_delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch_mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn one_two_three() {
        let mut s = RunningStat::scalar();
        for x in [1.0, 2.0, 3.0] {
            s.update_scalar(x).unwrap();
        }
        assert_eq!(s.mean_scalar(), 2.0);
        assert_eq!(s.m2[0], 2.0);
        assert!((s.variance_scalar() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn first_update_normalizes_to_zero() {
        let mut s = RunningStat::scalar();
        let (x, var) = s.update_scalar(42.0).unwrap();
        assert_eq!((x, var), (0.0, 0.0));
    }

    #[test]
    fn constant_stream() {
        let mut s = RunningStat::scalar();
        for _ in 0..50 {
            let (x, var) = s.update_scalar(-3.5).unwrap();
            assert_eq!(x, 0.0);
            assert_eq!(var, 0.0);
        }
        assert_eq!(s.mean_scalar(), -3.5);
    }

    #[test]
    fn non_finite_is_refused() {
        let mut s = RunningStat::new(2);
        s.update(&[1.0, 2.0]).unwrap();
        let before = s.clone();
        assert!(matches!(
            s.update(&[1.0, f64::INFINITY]),
            Err(NormError::NonFinite { lane: 1, .. })
        ));
        assert_eq!(s, before);
    }

    #[test]
    fn literal_mode_divides_by_variance() {
        let mut s = RunningStat::scalar().with_mode(NormMode::LiteralPseudocode);
        assert!(s.update_scalar(1.0).unwrap().0.is_nan());
        let (x, var) = s.update_scalar(3.0).unwrap();
        // mean 2, m2 2, var 1, delta2 = 1
        assert_eq!(var, 1.0);
        assert_eq!(x, 1.0);
        let (x, var) = s.update_scalar(8.0).unwrap();
        let (mean, v) = batch_mean_var(&[1.0, 3.0, 8.0]);
        assert!((var - v).abs() < 1e-12);
        assert!((x - (8.0 - mean) / v).abs() < 1e-12);
    }

    #[test]
    fn zscore_matches_batch() {
        let xs = [0.5, 1.5, -2.0, 4.0];
        let mut s = RunningStat::scalar();
        let mut last = 0.0;
        for &x in &xs {
            last = s.update_scalar(x).unwrap().0;
        }
        let (mean, var) = batch_mean_var(&xs);
        assert!((last - (4.0 - mean) / (var.sqrt() + ZSCORE_EPS)).abs() < 1e-12);
    }

    #[test]
    fn vector_lanes_are_independent() {
        let mut s = RunningStat::new(2);
        for k in 0..10 {
            s.update(&[k as f64, 5.0]).unwrap();
        }
        let var = s.variance();
        assert!((var[0] - 8.25).abs() < 1e-12);
        assert_eq!(var[1], 0.0);
    }

    #[test]
    fn sigma_is_one_until_two_returns() {
        let mut td = TdScaleState::new();
        assert_eq!(td.update(1.0, 0.99, None).unwrap(), 1.0);
        assert_eq!(td.update(-4.0, 0.99, None).unwrap(), 1.0);
        assert_eq!(td.update(2.0, 0.0, Some(3.0)).unwrap(), 1.0);
        assert_eq!(td.update(5.0, 0.99, None).unwrap(), 1.0);
        let sigma = td.update(0.0, 0.0, Some(-1.0)).unwrap();
        assert_ne!(sigma, 1.0);
    }

    #[test]
    fn degenerate_constants_hit_floor() {
        let mut td = TdScaleState::new();
        for _ in 0..3 {
            for _ in 0..4 {
                td.update(0.0, 0.9, None).unwrap();
            }
            td.update(0.0, 0.9, Some(0.0)).unwrap();
        }
        assert_eq!(td.sigma_delta, SIGMA_DELTA_FLOOR);
        assert!(scale(1.0, td.sigma_delta).is_finite());
    }

    #[test]
    fn sigma_formula() {
        // var_R = 0.25, var_gamma = 0.01, mean G^2 = 5
        let var_r: f64 = 0.25;
        let var_g = 0.01;
        let mean_g2 = 5.0;
        assert!(((var_r + mean_g2 * var_g).sqrt() - 0.547_722_557_505_166).abs() < 1e-12);
        let mut td = TdScaleState::new();
        // rewards alternate 0/1 -> var 0.25; gammas alternate 0.8/1.0 -> var 0.01
        // returns^2: 4 and 6 -> mean 5
        let rs = [0.0, 1.0, 0.0, 1.0];
        let gs = [0.8, 1.0, 0.8, 1.0];
        td.update(rs[0], gs[0], None).unwrap();
        td.update(rs[1], gs[1], Some(2.0)).unwrap();
        td.update(rs[2], gs[2], None).unwrap();
        let sigma = td.update(rs[3], gs[3], Some(6f64.sqrt())).unwrap();
        assert!((sigma - 0.547_722_557_505_166).abs() < 1e-12);
    }

    #[test]
    fn finish_episode_resets_return() {
        let mut td = TdScaleState::new();
        td.accumulate_reward(-1.0);
        td.accumulate_reward(-1.0);
        td.finish_episode(-1.0).unwrap();
        assert_eq!(td.episode_return, 0.0);
        assert_eq!(td.stat_return_sq.mean_scalar(), 4.0);
        assert_eq!(td.stat_gamma.mean_scalar(), 0.0);
    }

    #[test]
    fn scale_values() {
        assert_eq!(scale(2.3, 1.0), 2.3);
        assert_eq!(scale(2.3, 0.5), 4.6);
        assert_eq!(scale(0.0, 0.37), 0.0);
    }

    proptest! {
        #[test]
        fn welford_matches_two_pass(xs in proptest::collection::vec(-1e3f64..1e3, 1..200)) {
            let mut s = RunningStat::scalar();
            for &x in &xs {
                s.update_scalar(x).unwrap();
            }
            let (mean, var) = batch_mean_var(&xs);
            prop_assert!((s.mean_scalar() - mean).abs() <= 1e-9 * mean.abs().max(1.0));
            prop_assert!((s.variance_scalar() - var).abs() <= 1e-9 * var.max(1e-6));
            prop_assert!(s.m2[0] >= 0.0);
        }
    }
}
