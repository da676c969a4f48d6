//! Incremental actor-critic agents.
//!
//! Every agent learns from the single most recent transition and keeps no
//! buffer. The step protocol is
//!
//! 1. [`Agent::begin_episode`] with the first observation of an episode,
//! 2. [`Agent::act`] to sample an action for the current state,
//! 3. [`Agent::observe`] with the environment's reply, which performs the
//!    update and advances the current state,
//!
//! repeating 2-3 until the episode ends. Observation statistics receive exactly
//! one update per observed state.
//!
//! Supported algorithms ([`AgentKind`]):
//!
//! - `avg`: action value gradient. One Q critic; the actor follows
//!   `d/dtheta [Q(S, A_theta) - eta log pi(A_theta|S)]` through the
//!   reparameterized action that was executed.
//! - `avg_target`: the same with a Polyak-averaged target critic for
//!   bootstrapping.
//! - `iac`: one-step actor-critic with a state-value critic and the
//!   likelihood-ratio gradient.
//! - `sac1`: soft actor-critic with twin critics, twin targets and a learned
//!   entropy coefficient, updating from one transition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{self, SquashedNormalParams, SquashedSample};
use crate::env::{EnvSpec, EnvStep};
use crate::nn::{Activation, AdamState, Direction, FeatureNorm, Init, MlpSpec, Network, NnError, ParamBundle, Tape, UpdateRule};
use crate::norm::{NormError, NormMode, RunningStat, TdScaleState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("agent diverged: {0}")]
    Diverged(String),
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("agent used out of order: {0}")]
    Usage(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl From<NormError> for AgentError {
    fn from(e: NormError) -> Self {
        AgentError::Diverged(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Avg,
    AvgTarget,
    Iac,
    Sac1,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Avg => "avg",
            AgentKind::AvgTarget => "avg_target",
            AgentKind::Iac => "iac",
            AgentKind::Sac1 => "sac1",
        }
    }
}

/// Which entropy bonus regularizes the actor and the bootstrap target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyKind {
    /// `-log pi(A|S)` at the sampled action.
    Sample,
    /// Closed-form entropy of the pre-squash normal.
    Distribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Switches {
    pub norm_obs: bool,
    pub scaled_td: bool,
    pub feature_norm: FeatureNorm,
}

impl Switches {
    pub fn all_on() -> Self {
        Switches {
            norm_obs: true,
            scaled_td: true,
            feature_norm: FeatureNorm::Pnorm,
        }
    }

    pub fn all_off() -> Self {
        Switches {
            norm_obs: false,
            scaled_td: false,
            feature_norm: FeatureNorm::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    /// Entropy coefficient; fixed for AVG and IAC, the initial value for SAC-1.
    pub eta: f64,
    /// Actor learning rate.
    pub alpha_pi: f64,
    /// Critic learning rate.
    pub alpha_q: f64,
    /// Learning rate of SAC-1's log entropy coefficient.
    pub eta_lr: f64,
    /// Polyak coefficient for target critics.
    pub tau: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub switches: Switches,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub init: Init,
    /// Entropy bonus; unset means closed-form for IAC and per-sample otherwise.
    pub entropy: Option<EntropyKind>,
    /// Drop the bootstrap term at true terminals. Off reproduces the unmasked pseudocode.
    pub terminal_mask: bool,
    pub update_rule: UpdateRule,
    /// SAC-1 entropy target; `None` means `-act_dim`.
    pub target_entropy: Option<f64>,
    pub norm_mode: NormMode,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.99,
            eta: 0.07,
            alpha_pi: 0.0063,
            alpha_q: 0.0087,
            eta_lr: 3e-4,
            tau: 0.005,
            beta1: 0.0,
            beta2: 0.999,
            switches: Switches::all_on(),
            hidden_dims: vec![256, 256],
            activation: Activation::LeakyRelu,
            init: Init::default(),
            entropy: None,
            terminal_mask: true,
            update_rule: UpdateRule::Adam,
            target_entropy: None,
            norm_mode: NormMode::ZScore,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |msg: &str| Err(AgentError::Config(msg.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.eta >= 0.0) {
            return bad("eta must be non-negative");
        }
        if !(self.alpha_pi > 0.0 && self.alpha_q > 0.0 && self.eta_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return bad("hidden_dims must be non-empty with positive widths");
        }
        Ok(())
    }

    fn mlp(&self, input_dim: usize, output_dim: usize) -> MlpSpec {
        MlpSpec::new(input_dim, self.hidden_dims.clone(), output_dim)
            .with_activation(self.activation)
            .with_feature_norm(self.switches.feature_norm)
            .with_init(self.init)
    }
}

/// Algorithm choice plus its hyperparameters, as they appear in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSetup {
    pub kind: AgentKind,
    #[serde(flatten)]
    pub config: AgentConfig,
}

impl Default for AgentSetup {
    fn default() -> Self {
        AgentSetup {
            kind: AgentKind::Avg,
            config: AgentConfig::default(),
        }
    }
}

/// One transition in the agent's (possibly normalized) observation space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: SquashedSample,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub delta: f64,
    pub delta_scaled: f64,
    pub sigma_delta: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub q_value: f64,
    pub entropy_term: f64,
}

/// Step-driven agent interface used by the training harness.
pub trait Agent: Send {
    fn kind(&self) -> AgentKind;

    fn begin_episode(&mut self, observation: &[f64]) -> Result<(), AgentError>;

    fn act(&mut self) -> Result<Vec<f64>, AgentError>;

    /// Learns from the reply to the last action. `step.reward` is the reward the
    /// agent optimizes (after any reward scaling).
    fn observe(&mut self, step: &EnvStep) -> Result<UpdateDiagnostics, AgentError>;

    /// Zero-noise action for evaluation; statistics are not updated.
    fn act_deterministic(&self, observation: &[f64]) -> Result<Vec<f64>, AgentError>;

    fn diverged(&self) -> bool;

    fn sigma_delta(&self) -> f64 {
        1.0
    }

    /// Full learner state for checkpointing, when the agent supports it.
    fn snapshot(&self) -> Option<IncrementalAgent> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Critics {
    /// Q(s, a) with an optional target copy.
    Q {
        critic: Network,
        target: Option<ParamBundle>,
    },
    /// V(s).
    V { critic: Network },
    /// Twin Q critics, twin targets and a learned log entropy coefficient.
    TwinQ {
        critics: [Network; 2],
        targets: [ParamBundle; 2],
        log_eta: f64,
        eta_optimizer: AdamState,
    },
}

/// The single learner implementation behind every [`AgentKind`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncrementalAgent {
    pub kind: AgentKind,
    pub config: AgentConfig,
    pub env_spec: EnvSpec,
    pub actor: Network,
    pub critics: Critics,
    pub obs_stat: RunningStat,
    pub td_scale: TdScaleState,
    pub rng: ChaCha8Rng,
    /// Current state as the networks see it.
    pub state: Option<Vec<f64>>,
    /// Action sampled at `state`, awaiting its transition.
    pub pending: Option<SquashedSample>,
    pub steps: u64,
    pub episodes: u64,
    pub diverged: bool,
    #[serde(skip)]
    actor_tape: Option<Tape>,
}

impl PartialEq for IncrementalAgent {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.config == other.config
            && self.env_spec == other.env_spec
            && self.actor == other.actor
            && self.critics == other.critics
            && self.obs_stat == other.obs_stat
            && self.td_scale == other.td_scale
            && self.rng == other.rng
            && self.state == other.state
            && self.pending == other.pending
            && self.steps == other.steps
            && self.episodes == other.episodes
            && self.diverged == other.diverged
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

fn finite_or_diverge(what: &str, v: f64) -> Result<f64, AgentError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AgentError::Diverged(format!("{what} is {v}")))
    }
}

fn grad_norm(g: &[f64]) -> f64 {
    crate::nn::l2_norm(g)
}

impl IncrementalAgent {
    pub fn new(kind: AgentKind, config: AgentConfig, env_spec: EnvSpec) -> Result<Self, AgentError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let obs = env_spec.obs_dim;
        let act = env_spec.act_dim;
        let (b1, b2, rule) = (config.beta1, config.beta2, config.update_rule);
        let actor = Network::new(config.mlp(obs, 2 * act), &mut rng, config.alpha_pi, b1, b2, rule)?;
        let critics = match kind {
            AgentKind::Avg | AgentKind::AvgTarget => {
                let critic = Network::new(config.mlp(obs + act, 1), &mut rng, config.alpha_q, b1, b2, rule)?;
                let target = (kind == AgentKind::AvgTarget).then(|| critic.params.clone());
                Critics::Q { critic, target }
            }
            AgentKind::Iac => Critics::V {
                critic: Network::new(config.mlp(obs, 1), &mut rng, config.alpha_q, b1, b2, rule)?,
            },
            AgentKind::Sac1 => {
                let c1 = Network::new(config.mlp(obs + act, 1), &mut rng, config.alpha_q, b1, b2, rule)?;
                let c2 = Network::new(config.mlp(obs + act, 1), &mut rng, config.alpha_q, b1, b2, rule)?;
                let targets = [c1.params.clone(), c2.params.clone()];
                if !(config.eta > 0.0) {
                    return Err(AgentError::Config("SAC-1 needs a positive initial eta".into()));
                }
                Critics::TwinQ {
                    critics: [c1, c2],
                    targets,
                    log_eta: config.eta.ln(),
                    eta_optimizer: AdamState::new(1, config.eta_lr, b1, b2).with_rule(rule),
                }
            }
        };
        Ok(IncrementalAgent {
            kind,
            obs_stat: RunningStat::new(obs).with_mode(config.norm_mode),
            td_scale: TdScaleState::new(),
            config,
            env_spec,
            actor,
            critics,
            rng,
            state: None,
            pending: None,
            steps: 0,
            episodes: 0,
            diverged: false,
            actor_tape: None,
        })
    }

    /// Current entropy coefficient.
    pub fn eta(&self) -> f64 {
        match &self.critics {
            Critics::TwinQ { log_eta, .. } => log_eta.exp(),
            _ => self.config.eta,
        }
    }

    /// Every parameter vector and every optimizer moment vector, in a fixed
    /// order: actor, online critics, target critics, then the entropy
    /// coefficient's optimizer.
    pub fn blocks_mut(&mut self) -> (Vec<&mut Vec<f64>>, Vec<&mut Vec<f64>>) {
        let mut params = vec![&mut self.actor.params.values];
        let mut moments = vec![&mut self.actor.optimizer.m, &mut self.actor.optimizer.v];
        match &mut self.critics {
            Critics::Q { critic, target } => {
                params.push(&mut critic.params.values);
                moments.extend([&mut critic.optimizer.m, &mut critic.optimizer.v]);
                if let Some(t) = target {
                    params.push(&mut t.values);
                }
            }
            Critics::V { critic } => {
                params.push(&mut critic.params.values);
                moments.extend([&mut critic.optimizer.m, &mut critic.optimizer.v]);
            }
            Critics::TwinQ {
                critics,
                targets,
                eta_optimizer,
                ..
            } => {
                for c in critics.iter_mut() {
                    params.push(&mut c.params.values);
                    moments.extend([&mut c.optimizer.m, &mut c.optimizer.v]);
                }
                for t in targets.iter_mut() {
                    params.push(&mut t.values);
                }
                moments.extend([&mut eta_optimizer.m, &mut eta_optimizer.v]);
            }
        }
        (params, moments)
    }

    fn preprocess(&mut self, observation: &[f64]) -> Result<Vec<f64>, AgentError> {
        if observation.len() != self.env_spec.obs_dim {
            return Err(AgentError::Usage(format!(
                "observation has {} components, expected {}",
                observation.len(),
                self.env_spec.obs_dim
            )));
        }
        if self.config.switches.norm_obs {
            Ok(self.obs_stat.update(observation)?.x_norm)
        } else {
            Ok(observation.to_vec())
        }
    }

    fn policy(&self, state: &[f64]) -> Result<(SquashedNormalParams, Vec<bool>, Tape), AgentError> {
        let (head, tape) = self.actor.forward(state)?;
        if let Some(v) = head.iter().find(|v| !v.is_finite()) {
            return Err(AgentError::Diverged(format!("policy output is {v}")));
        }
        let (params, open) = SquashedNormalParams::from_head(&head);
        Ok((params, open, tape))
    }

    /// Gradient step on the actor given d objective / d (mean, log_std); the
    /// objective is maximized.
    fn actor_ascent(
        &mut self,
        tape: &Tape,
        mut d_mean: Vec<f64>,
        mut d_log_std: Vec<f64>,
        open: &[bool],
    ) -> Result<f64, AgentError> {
        for (g, &o) in d_log_std.iter_mut().zip(open) {
            if !o {
                *g = 0.0;
            }
        }
        d_mean.append(&mut d_log_std);
        let upstream: Vec<f64> = d_mean.iter().map(|g| -g).collect();
        let grad = self.actor.grad_wrt_params(tape, &upstream)?;
        let norm = grad_norm(&grad);
        finite_or_diverge("actor gradient norm", norm)?;
        self.actor.descend(&grad).map_err(diverged_from_nn)?;
        Ok(norm)
    }

    /// In-episode scaling call; the episode-end call with a zero discount is made
    /// by [`Agent::observe`].
    fn sigma_for(&mut self, reward: f64) -> Result<f64, AgentError> {
        self.td_scale.accumulate_reward(reward);
        if self.config.switches.scaled_td {
            Ok(self.td_scale.update(reward, self.config.gamma, None)?)
        } else {
            Ok(1.0)
        }
    }

    fn bootstraps(&self, tr: &Transition) -> bool {
        !(tr.terminal && self.config.terminal_mask)
    }

    /// Runs the update for one transition. `tr.action` must have been sampled
    /// from the current policy at `tr.state`.
    pub fn update(&mut self, tr: &Transition) -> Result<UpdateDiagnostics, AgentError> {
        if self.diverged {
            return Err(AgentError::Diverged("divergence flag is set".into()));
        }
        let result = match self.kind {
            AgentKind::Avg | AgentKind::AvgTarget => self.update_avg(tr),
            AgentKind::Iac => self.update_iac(tr),
            AgentKind::Sac1 => self.update_sac1(tr),
        };
        if matches!(result, Err(AgentError::Diverged(_))) {
            self.diverged = true;
        }
        result
    }

    fn entropy_kind(&self) -> EntropyKind {
        self.config.entropy.unwrap_or(match self.kind {
            AgentKind::Iac => EntropyKind::Distribution,
            AgentKind::Avg | AgentKind::AvgTarget | AgentKind::Sac1 => EntropyKind::Sample,
        })
    }

    fn update_avg(&mut self, tr: &Transition) -> Result<UpdateDiagnostics, AgentError> {
        let sigma = self.sigma_for(tr.reward)?;
        let gamma = self.config.gamma;
        let eta = self.config.eta;
        let entropy = self.entropy_kind();
        let act_dim = self.env_spec.act_dim;

        let (pi, open, actor_tape) = match self.actor_tape.take() {
            Some(tape) if tape.input() == tr.state.as_slice() => {
                let (pi, open) = SquashedNormalParams::from_head(tape.output());
                (pi, open, tape)
            }
            _ => self.policy(&tr.state)?,
        };
        let sample = &tr.action;
        let sa = concat(&tr.state, &sample.action);

        let bootstrap = if self.bootstraps(tr) {
            let (pi_next, _, _) = self.policy(&tr.next_state)?;
            let next = pi_next.sample_reparam(&mut self.rng);
            let Critics::Q { critic, target } = &self.critics else {
                unreachable!("AVG uses a single Q critic")
            };
            let params = target.as_ref().unwrap_or(&critic.params);
            let (q_next, _) = crate::nn::forward(params, &critic.spec, &concat(&tr.next_state, &next.action))?;
            let bonus = match entropy {
                EntropyKind::Sample => -eta * pi_next.log_prob(&next),
                EntropyKind::Distribution => eta * dist::normal_entropy(&pi_next.log_std),
            };
            q_next[0] + bonus
        } else {
            0.0
        };

        let Critics::Q { critic, .. } = &mut self.critics else {
            unreachable!("AVG uses a single Q critic")
        };
        let (q, critic_tape) = critic.forward(&sa)?;
        let delta = finite_or_diverge("TD error", tr.reward + gamma * bootstrap - q[0])?;
        let delta_scaled = finite_or_diverge("scaled TD error", crate::norm::scale(delta, sigma))?;

        // semi-gradient: minimize -delta * Q(S, A)
        let mut critic_grad = critic.grad_wrt_params(&critic_tape, &[1.0])?;
        critic_grad.iter_mut().for_each(|g| *g *= -delta_scaled);
        let critic_grad_norm = finite_or_diverge("critic gradient norm", grad_norm(&critic_grad))?;
        critic.descend(&critic_grad).map_err(diverged_from_nn)?;

        // actor through the updated critic
        let (_, tape_after) = critic.forward(&sa)?;
        let dq_dinput = critic.grad_wrt_input(&tape_after, &[1.0])?;
        let dq_da = &dq_dinput[dq_dinput.len() - act_dim..];
        let (mut d_mean, mut d_log_std) = dist::action_vjp(&pi, sample, dq_da);
        let log_prob = pi.log_prob(sample);
        match entropy {
            EntropyKind::Sample => {
                let (lm, ls) = dist::log_prob_reparam_grad(&pi, sample);
                for (d, l) in d_mean.iter_mut().zip(&lm) {
                    *d -= eta * l;
                }
                for (d, l) in d_log_std.iter_mut().zip(&ls) {
                    *d -= eta * l;
                }
            }
            EntropyKind::Distribution => d_log_std.iter_mut().for_each(|d| *d += eta),
        }
        let actor_grad_norm = self.actor_ascent(&actor_tape, d_mean, d_log_std, &open)?;

        if let Critics::Q {
            critic,
            target: Some(target),
        } = &mut self.critics
        {
            target.polyak_update(&critic.params, self.config.tau);
        }

        Ok(UpdateDiagnostics {
            delta,
            delta_scaled,
            sigma_delta: sigma,
            actor_grad_norm,
            critic_grad_norm,
            q_value: q[0],
            entropy_term: match entropy {
                EntropyKind::Sample => -eta * log_prob,
                EntropyKind::Distribution => eta * dist::normal_entropy(&pi.log_std),
            },
        })
    }

    fn update_iac(&mut self, tr: &Transition) -> Result<UpdateDiagnostics, AgentError> {
        let sigma = self.sigma_for(tr.reward)?;
        let gamma = self.config.gamma;
        let eta = self.config.eta;
        let bootstraps = self.bootstraps(tr);
        let Critics::V { critic } = &mut self.critics else {
            unreachable!("IAC uses a state-value critic")
        };
        let (v, v_tape) = critic.forward(&tr.state)?;
        let bootstrap = if bootstraps {
            critic.forward(&tr.next_state)?.0[0]
        } else {
            0.0
        };
        let delta = finite_or_diverge("TD error", tr.reward + gamma * bootstrap - v[0])?;
        let delta_scaled = finite_or_diverge("scaled TD error", crate::norm::scale(delta, sigma))?;
        let mut critic_grad = critic.grad_wrt_params(&v_tape, &[1.0])?;
        critic_grad.iter_mut().for_each(|g| *g *= -delta_scaled);
        let critic_grad_norm = finite_or_diverge("critic gradient norm", grad_norm(&critic_grad))?;
        critic.descend(&critic_grad).map_err(diverged_from_nn)?;

        let (pi, open, tape) = match self.actor_tape.take() {
            Some(tape) if tape.input() == tr.state.as_slice() => {
                let (pi, open) = SquashedNormalParams::from_head(tape.output());
                (pi, open, tape)
            }
            _ => self.policy(&tr.state)?,
        };
        // likelihood ratio: delta is a constant weight on grad log pi(A|S)
        let (sm, sl) = dist::log_prob_score(&pi, &tr.action);
        let mut d_mean: Vec<f64> = sm.iter().map(|g| g * delta_scaled).collect();
        let mut d_log_std: Vec<f64> = sl.iter().map(|g| g * delta_scaled).collect();
        let entropy_term = match self.entropy_kind() {
            EntropyKind::Distribution => {
                d_log_std.iter_mut().for_each(|d| *d += eta);
                eta * dist::normal_entropy(&pi.log_std)
            }
            EntropyKind::Sample => {
                for (d, g) in d_mean.iter_mut().zip(&sm) {
                    *d -= eta * g;
                }
                for (d, g) in d_log_std.iter_mut().zip(&sl) {
                    *d -= eta * g;
                }
                -eta * pi.log_prob(&tr.action)
            }
        };
        let actor_grad_norm = self.actor_ascent(&tape, d_mean, d_log_std, &open)?;
        Ok(UpdateDiagnostics {
            delta,
            delta_scaled,
            sigma_delta: sigma,
            actor_grad_norm,
            critic_grad_norm,
            q_value: v[0],
            entropy_term,
        })
    }

    fn update_sac1(&mut self, tr: &Transition) -> Result<UpdateDiagnostics, AgentError> {
        let sigma = self.sigma_for(tr.reward)?;
        let gamma = self.config.gamma;
        let act_dim = self.env_spec.act_dim;
        let target_entropy = self.config.target_entropy.unwrap_or(-(act_dim as f64));
        let eta = self.eta();
        let sa = concat(&tr.state, &tr.action.action);

        let next = if self.bootstraps(tr) {
            let (pi_next, _, _) = self.policy(&tr.next_state)?;
            let next = pi_next.sample_reparam(&mut self.rng);
            let log_prob = pi_next.log_prob(&next);
            Some((concat(&tr.next_state, &next.action), log_prob))
        } else {
            None
        };

        let Critics::TwinQ { critics, targets, .. } = &mut self.critics else {
            unreachable!("SAC-1 uses twin critics")
        };
        let mut deltas = [0.0; 2];
        let mut scaled = [0.0; 2];
        let mut q_values = [0.0; 2];
        let mut sq_norm = 0.0;
        for i in 0..2 {
            let bootstrap = match &next {
                Some((input, log_prob)) => {
                    let (q_next, _) = crate::nn::forward(&targets[i], &critics[i].spec, input)?;
                    q_next[0] - eta * log_prob
                }
                None => 0.0,
            };
            let (q, tape) = critics[i].forward(&sa)?;
            deltas[i] = finite_or_diverge("TD error", tr.reward + gamma * bootstrap - q[0])?;
            scaled[i] = finite_or_diverge("scaled TD error", crate::norm::scale(deltas[i], sigma))?;
            q_values[i] = q[0];
            let mut grad = critics[i].grad_wrt_params(&tape, &[1.0])?;
            grad.iter_mut().for_each(|g| *g *= -scaled[i]);
            sq_norm += grad.iter().map(|g| g * g).sum::<f64>();
            finite_or_diverge("critic gradient norm", sq_norm)?;
            critics[i].descend(&grad).map_err(diverged_from_nn)?;
        }

        // a fresh reparameterized action drives the actor
        let (pi, open, tape) = self.policy(&tr.state)?;
        let fresh = pi.sample_reparam(&mut self.rng);
        let Critics::TwinQ { critics, .. } = &self.critics else {
            unreachable!()
        };
        let input = concat(&tr.state, &fresh.action);
        let (q0, t0) = critics[0].forward(&input)?;
        let (q1, t1) = critics[1].forward(&input)?;
        let dq_dinput = if q1[0] < q0[0] {
            critics[1].grad_wrt_input(&t1, &[1.0])?
        } else {
            critics[0].grad_wrt_input(&t0, &[1.0])?
        };
        let dq_da = &dq_dinput[dq_dinput.len() - act_dim..];
        let (mut d_mean, mut d_log_std) = dist::action_vjp(&pi, &fresh, dq_da);
        let (lm, ls) = dist::log_prob_reparam_grad(&pi, &fresh);
        for (d, l) in d_mean.iter_mut().zip(&lm) {
            *d -= eta * l;
        }
        for (d, l) in d_log_std.iter_mut().zip(&ls) {
            *d -= eta * l;
        }
        let log_prob = pi.log_prob(&fresh);
        let actor_grad_norm = self.actor_ascent(&tape, d_mean, d_log_std, &open)?;

        let Critics::TwinQ {
            critics,
            targets,
            log_eta,
            eta_optimizer,
        } = &mut self.critics
        else {
            unreachable!()
        };
        // d/d log_eta of log_eta * (-log pi - target_entropy)
        let eta_grad = finite_or_diverge("entropy coefficient gradient", -log_prob - target_entropy)?;
        let mut param = [*log_eta];
        eta_optimizer
            .step(&mut param, &[eta_grad], Direction::Descent)
            .map_err(diverged_from_nn)?;
        *log_eta = param[0];
        for (t, c) in targets.iter_mut().zip(critics.iter()) {
            t.polyak_update(&c.params, self.config.tau);
        }

        Ok(UpdateDiagnostics {
            delta: deltas[0],
            delta_scaled: scaled[0],
            sigma_delta: sigma,
            actor_grad_norm,
            critic_grad_norm: sq_norm.sqrt(),
            q_value: q_values[0],
            entropy_term: -eta * log_prob,
        })
    }
}

fn diverged_from_nn(e: NnError) -> AgentError {
    match e {
        NnError::NonFiniteGradient { .. } | NnError::NonFiniteInput { .. } => AgentError::Diverged(e.to_string()),
        other => AgentError::Nn(other),
    }
}

impl Agent for IncrementalAgent {
    fn kind(&self) -> AgentKind {
        self.kind
    }

    fn begin_episode(&mut self, observation: &[f64]) -> Result<(), AgentError> {
        let state = self.preprocess(observation)?;
        self.state = Some(state);
        self.pending = None;
        self.actor_tape = None;
        self.td_scale.reset_return();
        Ok(())
    }

    fn act(&mut self) -> Result<Vec<f64>, AgentError> {
        if self.diverged {
            return Err(AgentError::Diverged("divergence flag is set".into()));
        }
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| AgentError::Usage("act called outside an episode".into()))?;
        let (pi, _, tape) = match self.policy(state) {
            Ok(p) => p,
            Err(e) => {
                if matches!(e, AgentError::Diverged(_)) {
                    self.diverged = true;
                }
                return Err(e);
            }
        };
        let sample = pi.sample_reparam(&mut self.rng);
        let action = sample.action.clone();
        self.pending = Some(sample);
        self.actor_tape = Some(tape);
        Ok(action)
    }

    fn observe(&mut self, step: &EnvStep) -> Result<UpdateDiagnostics, AgentError> {
        let state = self
            .state
            .take()
            .ok_or_else(|| AgentError::Usage("observe called outside an episode".into()))?;
        let action = self
            .pending
            .take()
            .ok_or_else(|| AgentError::Usage("observe called before act".into()))?;
        let next_state = self.preprocess(&step.observation)?;
        let tr = Transition {
            state,
            action,
            reward: step.reward,
            next_state,
            terminal: step.terminal,
            truncated: step.truncated,
        };
        let diag = self.update(&tr)?;
        self.steps += 1;
        if step.done() {
            if self.config.switches.scaled_td {
                self.td_scale.finish_episode(step.reward)?;
            } else {
                self.td_scale.reset_return();
            }
            self.episodes += 1;
        } else {
            self.state = Some(tr.next_state);
        }
        Ok(diag)
    }

    fn act_deterministic(&self, observation: &[f64]) -> Result<Vec<f64>, AgentError> {
        let state = if self.config.switches.norm_obs {
            self.obs_stat.normalize(observation)
        } else {
            observation.to_vec()
        };
        let (pi, _, _) = self.policy(&state)?;
        Ok(pi.mode().action)
    }

    fn diverged(&self) -> bool {
        self.diverged
    }

    fn sigma_delta(&self) -> f64 {
        self.td_scale.sigma_delta
    }

    fn snapshot(&self) -> Option<IncrementalAgent> {
        Some(self.clone())
    }
}
