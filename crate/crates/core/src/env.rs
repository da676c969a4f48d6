//! Continuous-control environments.
//!
//! Two tasks are built in: Dot Reacher (drive a point mass onto a stationary
//! target and stop there) and a pendulum swing-up. External simulators plug in
//! through a line-delimited JSON protocol, see [`serve`] and [`ProtocolClient`].

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("action has {got} components, environment expects {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("peer did not answer within {0:?}")]
    Timeout(Duration),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("environment state cannot be checkpointed")]
    NotCheckpointable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvStep {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// Task-defined end (goal reached); no bootstrapping past it.
    pub terminal: bool,
    /// Time limit reached.
    pub truncated: bool,
}

impl EnvStep {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

pub trait Env: Send {
    fn spec(&self) -> EnvSpec;

    /// Starts a new episode. `Some(seed)` re-seeds the environment's generator first.
    fn reset(&mut self, seed: Option<u64>) -> Result<Vec<f64>, EnvError>;

    fn step(&mut self, action: &[f64]) -> Result<EnvStep, EnvError>;

    fn snapshot(&self) -> Result<Value, EnvError> {
        Err(EnvError::NotCheckpointable)
    }

    fn restore(&mut self, _state: &Value) -> Result<(), EnvError> {
        Err(EnvError::NotCheckpointable)
    }
}

fn clamp_action(action: &[f64], expected: usize) -> Result<Vec<f64>, EnvError> {
    if action.len() != expected {
        return Err(EnvError::ActionDim {
            expected,
            got: action.len(),
        });
    }
    if action.iter().any(|a| a.is_nan()) {
        return Err(EnvError::Usage("action contains NaN".into()));
    }
    Ok(action.iter().map(|a| a.clamp(-1.0, 1.0)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DotReacherVariant {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DotReacherConfig {
    pub variant: DotReacherVariant,
    /// Integration step in seconds.
    pub dt: f64,
    pub max_accel: f64,
    pub arena_half_width: f64,
    pub target_radius: f64,
    pub velocity_threshold: f64,
    pub timeout_steps: usize,
    pub reward_per_step: f64,
    pub target: [f64; 2],
}

impl DotReacherConfig {
    pub fn easy() -> Self {
        DotReacherConfig {
            variant: DotReacherVariant::Easy,
            dt: 0.05,
            max_accel: 1.0,
            arena_half_width: 1.0,
            target_radius: 0.15,
            velocity_threshold: 0.25,
            timeout_steps: 500,
            reward_per_step: -1.0,
            target: [0.0, 0.0],
        }
    }

    pub fn hard() -> Self {
        DotReacherConfig {
            variant: DotReacherVariant::Hard,
            target_radius: 0.05,
            velocity_threshold: 0.10,
            ..Self::easy()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.target_radius > 0.0 && self.target_radius < self.arena_half_width) {
            return Err(EnvError::Config(
                "target_radius must be positive and smaller than arena_half_width".into(),
            ));
        }
        if self.timeout_steps == 0 {
            return Err(EnvError::Config("timeout_steps must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.max_accel > 0.0) {
            return Err(EnvError::Config("dt and max_accel must be positive".into()));
        }
        if self.target.iter().any(|t| t.abs() > self.arena_half_width) {
            return Err(EnvError::Config("target lies outside the arena".into()));
        }
        Ok(())
    }
}

impl Default for DotReacherConfig {
    fn default() -> Self {
        Self::easy()
    }
}

/// A point mass in a square arena, accelerated by the action.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DotReacher {
    pub config: DotReacherConfig,
    pos: [f64; 2],
    vel: [f64; 2],
    steps: usize,
    needs_reset: bool,
    rng: ChaCha8Rng,
}

impl DotReacher {
    pub fn new(config: DotReacherConfig, seed: u64) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(DotReacher {
            config,
            pos: [0.0; 2],
            vel: [0.0; 2],
            steps: 0,
            needs_reset: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn velocity(&self) -> [f64; 2] {
        self.vel
    }

    /// Places the dot directly (tests and scripted starts).
    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
        self.steps = 0;
        self.needs_reset = false;
    }

    pub fn distance_to_target(&self) -> f64 {
        let dx = self.pos[0] - self.config.target[0];
        let dy = self.pos[1] - self.config.target[1];
        dx.hypot(dy)
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    fn at_goal(&self) -> bool {
        self.distance_to_target() <= self.config.target_radius
            && self.vel[0].hypot(self.vel[1]) <= self.config.velocity_threshold
    }
}

impl Env for DotReacher {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dim: 4,
            act_dim: 2,
        }
    }

    fn reset(&mut self, seed: Option<u64>) -> Result<Vec<f64>, EnvError> {
        if let Some(seed) = seed {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
        }
        let w = self.config.arena_half_width;
        loop {
            self.pos = [self.rng.random_range(-w..=w), self.rng.random_range(-w..=w)];
            if self.distance_to_target() > self.config.target_radius {
                break;
            }
        }
        self.vel = [0.0; 2];
        self.steps = 0;
        self.needs_reset = false;
        Ok(self.observation())
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvStep, EnvError> {
        if self.needs_reset {
            return Err(EnvError::Usage("step called before reset or after the episode ended".into()));
        }
        let action = clamp_action(action, 2)?;
        let c = &self.config;
        let w = c.arena_half_width;
        for i in 0..2 {
            self.vel[i] += c.max_accel * action[i] * c.dt;
            self.pos[i] += self.vel[i] * c.dt;
            if self.pos[i].abs() > w {
                self.pos[i] = self.pos[i].clamp(-w, w);
                self.vel[i] = 0.0;
            }
        }
        self.steps += 1;
        let terminal = self.at_goal();
        let truncated = self.steps >= self.config.timeout_steps;
        self.needs_reset = terminal || truncated;
        Ok(EnvStep {
            observation: self.observation(),
            reward: if terminal { 0.0 } else { self.config.reward_per_step },
            terminal,
            truncated,
        })
    }

    fn snapshot(&self) -> Result<Value, EnvError> {
        serde_json::to_value(self).map_err(|e| EnvError::Protocol(e.to_string()))
    }

    fn restore(&mut self, state: &Value) -> Result<(), EnvError> {
        *self = serde_json::from_value(state.clone()).map_err(|e| EnvError::Protocol(e.to_string()))?;
        Ok(())
    }
}

/// Pendulum swing-up: the pole starts at a random angle and must be brought
/// upright (angle 0) and balanced. Never terminates, truncates at the timeout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumConfig {
    pub dt: f64,
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub max_torque: f64,
    pub max_speed: f64,
    pub timeout_steps: usize,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        PendulumConfig {
            dt: 0.05,
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            max_torque: 2.0,
            max_speed: 8.0,
            timeout_steps: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pendulum {
    pub config: PendulumConfig,
    angle: f64,
    speed: f64,
    steps: usize,
    needs_reset: bool,
    rng: ChaCha8Rng,
}

fn wrap_angle(x: f64) -> f64 {
    use std::f64::consts::PI;
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl Pendulum {
    pub fn new(config: PendulumConfig, seed: u64) -> Result<Self, EnvError> {
        if config.timeout_steps == 0 || config.dt <= 0.0 {
            return Err(EnvError::Config("pendulum needs dt > 0 and timeout_steps >= 1".into()));
        }
        Ok(Pendulum {
            config,
            angle: 0.0,
            speed: 0.0,
            steps: 0,
            needs_reset: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.angle.cos(), self.angle.sin(), self.speed]
    }
}

impl Env for Pendulum {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            obs_dim: 3,
            act_dim: 1,
        }
    }

    fn reset(&mut self, seed: Option<u64>) -> Result<Vec<f64>, EnvError> {
        if let Some(seed) = seed {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
        }
        use std::f64::consts::PI;
        self.angle = self.rng.random_range(-PI..PI);
        self.speed = self.rng.random_range(-1.0..1.0);
        self.steps = 0;
        self.needs_reset = false;
        Ok(self.observation())
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvStep, EnvError> {
        if self.needs_reset {
            return Err(EnvError::Usage("step called before reset or after the episode ended".into()));
        }
        let c = &self.config;
        let torque = clamp_action(action, 1)?[0] * c.max_torque;
        let theta = wrap_angle(self.angle);
        let cost = theta * theta + 0.1 * self.speed * self.speed + 0.001 * torque * torque;
        let accel = 3.0 * c.gravity / (2.0 * c.length) * self.angle.sin()
            + 3.0 / (c.mass * c.length * c.length) * torque;
        self.speed = (self.speed + accel * c.dt).clamp(-c.max_speed, c.max_speed);
        self.angle += self.speed * c.dt;
        self.steps += 1;
        let truncated = self.steps >= c.timeout_steps;
        self.needs_reset = truncated;
        Ok(EnvStep {
            observation: self.observation(),
            reward: -cost,
            terminal: false,
            truncated,
        })
    }

    fn snapshot(&self) -> Result<Value, EnvError> {
        serde_json::to_value(self).map_err(|e| EnvError::Protocol(e.to_string()))
    }

    fn restore(&mut self, state: &Value) -> Result<(), EnvError> {
        *self = serde_json::from_value(state.clone()).map_err(|e| EnvError::Protocol(e.to_string()))?;
        Ok(())
    }
}

/// Environment selection as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    DotReacher(DotReacherConfig),
    Pendulum(PendulumConfig),
    /// A subprocess speaking the JSON-lines protocol on stdin/stdout.
    External { command: Vec<String>, timeout_ms: u64 },
}

impl EnvConfig {
    pub fn build(&self, seed: u64) -> Result<Box<dyn Env>, EnvError> {
        Ok(match self {
            EnvConfig::DotReacher(c) => Box::new(DotReacher::new(c.clone(), seed)?),
            EnvConfig::Pendulum(c) => Box::new(Pendulum::new(c.clone(), seed)?),
            EnvConfig::External {
                command,
                timeout_ms,
            } => Box::new(ProtocolClient::spawn(command, Duration::from_millis(*timeout_ms))?),
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Request {
    Spec,
    Reset {
        #[serde(default)]
        seed: Option<u64>,
    },
    Step {
        action: Vec<f64>,
    },
    Close,
}

fn step_json(step: &EnvStep) -> Value {
    json!({
        "obs": step.observation,
        "reward": step.reward,
        "terminal": step.terminal,
        "truncated": step.truncated,
    })
}

/// Serves `env` over a line-delimited JSON stream until `close` or end of input.
/// Malformed requests get an `{"error": ...}` reply and the session continues.
pub fn serve<E: Env + ?Sized, R: BufRead, W: Write>(env: &mut E, reader: R, mut writer: W) -> Result<(), EnvError> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (reply, close) = match serde_json::from_str::<Request>(&line) {
            Err(e) => (json!({ "error": format!("malformed request: {e}") }), false),
            Ok(Request::Spec) => {
                let s = env.spec();
                (json!({ "obs_dim": s.obs_dim, "act_dim": s.act_dim }), false)
            }
            Ok(Request::Reset { seed }) => match env.reset(seed) {
                Ok(obs) => (json!({ "obs": obs }), false),
                Err(e) => (json!({ "error": e.to_string() }), false),
            },
            Ok(Request::Step { action }) => match env.step(&action) {
                Ok(step) => (step_json(&step), false),
                Err(e) => (json!({ "error": e.to_string() }), false),
            },
            Ok(Request::Close) => (json!({ "ok": true }), true),
        };
        writeln!(writer, "{reply}")?;
        writer.flush()?;
        if close {
            break;
        }
    }
    Ok(())
}

/// Client side of the protocol; behaves like a local [`Env`].
pub struct ProtocolClient {
    writer: Box<dyn Write + Send>,
    replies: Receiver<std::io::Result<String>>,
    timeout: Duration,
    spec: EnvSpec,
    child: Option<Child>,
}

impl ProtocolClient {
    pub fn new<R, W>(reader: R, writer: W, timeout: Duration) -> Result<Self, EnvError>
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut client = ProtocolClient {
            writer: Box::new(writer),
            replies: rx,
            timeout,
            spec: EnvSpec {
                obs_dim: 0,
                act_dim: 0,
            },
            child: None,
        };
        let reply = client.request(&json!({ "op": "spec" }))?;
        client.spec = EnvSpec {
            obs_dim: field_usize(&reply, "obs_dim")?,
            act_dim: field_usize(&reply, "act_dim")?,
        };
        Ok(client)
    }

    /// Launches `command` and talks to it over its stdin/stdout.
    pub fn spawn(command: &[String], timeout: Duration) -> Result<Self, EnvError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| EnvError::Config("external env command is empty".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut client = match Self::new(BufReader::new(stdout), stdin, timeout) {
            Ok(c) => c,
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(e);
            }
        };
        client.child = Some(child);
        Ok(client)
    }

    fn request(&mut self, msg: &Value) -> Result<Value, EnvError> {
        writeln!(self.writer, "{msg}")?;
        self.writer.flush()?;
        let line = match self.replies.recv_timeout(self.timeout) {
            Ok(line) => line?,
            Err(RecvTimeoutError::Timeout) => return Err(EnvError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(EnvError::Protocol("peer closed the connection".into()))
            }
        };
        let reply: Value =
            serde_json::from_str(&line).map_err(|e| EnvError::Protocol(format!("malformed reply {line:?}: {e}")))?;
        if let Some(err) = reply.get("error") {
            return Err(EnvError::Protocol(format!("peer error: {err}")));
        }
        Ok(reply)
    }

    fn observation(&self, reply: &Value) -> Result<Vec<f64>, EnvError> {
        let obs: Vec<f64> = reply
            .get("obs")
            .and_then(|o| serde_json::from_value(o.clone()).ok())
            .ok_or_else(|| EnvError::Protocol(format!("reply without numeric obs: {reply}")))?;
        if obs.len() != self.spec.obs_dim {
            return Err(EnvError::Protocol(format!(
                "observation has {} components, spec says {}",
                obs.len(),
                self.spec.obs_dim
            )));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(EnvError::Protocol("observation is not finite".into()));
        }
        Ok(obs)
    }

    pub fn close(&mut self) -> Result<(), EnvError> {
        let result = self.request(&json!({ "op": "close" })).map(|_| ());
        if let Some(mut child) = self.child.take() {
            let _ = child.wait();
        }
        result
    }
}

impl Drop for ProtocolClient {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = writeln!(self.writer, "{}", json!({ "op": "close" }));
            let _ = self.writer.flush();
            if child.try_wait().ok().flatten().is_none() {
                std::thread::sleep(Duration::from_millis(10));
                if child.try_wait().ok().flatten().is_none() {
                    let _ = child.kill();
                }
            }
            let _ = child.wait();
        }
    }
}

fn field_usize(v: &Value, key: &str) -> Result<usize, EnvError> {
    v.get(key)
        .and_then(Value::as_u64)
        .map(|x| x as usize)
        .ok_or_else(|| EnvError::Protocol(format!("reply lacks integer field {key:?}: {v}")))
}

fn field_bool(v: &Value, key: &str) -> Result<bool, EnvError> {
    v.get(key)
        .and_then(Value::as_bool)
        .ok_or_else(|| EnvError::Protocol(format!("reply lacks boolean field {key:?}: {v}")))
}

impl Env for ProtocolClient {
    fn spec(&self) -> EnvSpec {
        self.spec
    }

    fn reset(&mut self, seed: Option<u64>) -> Result<Vec<f64>, EnvError> {
        let msg = match seed {
            Some(s) => json!({ "op": "reset", "seed": s }),
            None => json!({ "op": "reset" }),
        };
        let reply = self.request(&msg)?;
        self.observation(&reply)
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvStep, EnvError> {
        if action.len() != self.spec.act_dim {
            return Err(EnvError::ActionDim {
                expected: self.spec.act_dim,
                got: action.len(),
            });
        }
        let reply = self.request(&json!({ "op": "step", "action": action }))?;
        let observation = self.observation(&reply)?;
        let reward = reply
            .get("reward")
            .and_then(Value::as_f64)
            .ok_or_else(|| EnvError::Protocol(format!("reply lacks reward: {reply}")))?;
        Ok(EnvStep {
            observation,
            reward,
            terminal: field_bool(&reply, "terminal")?,
            truncated: field_bool(&reply, "truncated")?,
        })
    }
}

/// Scripted proportional-derivative controller for Dot Reacher: accelerates
/// toward the target and damps velocity near it.
pub fn dot_reacher_pd_action(obs: &[f64], target: [f64; 2]) -> Vec<f64> {
    const KP: f64 = 4.0;
    const KD: f64 = 4.0;
    (0..2)
        .map(|i| (KP * (target[i] - obs[i]) - KD * obs[i + 2]).clamp(-1.0, 1.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn easy(seed: u64) -> DotReacher {
        DotReacher::new(DotReacherConfig::easy(), seed).unwrap()
    }

    #[test]
    fn resets_avoid_target() {
        let mut env = easy(0);
        for _ in 0..10_000 {
            let obs = env.reset(None).unwrap();
            assert_eq!(obs.len(), 4);
            assert!(obs[0].hypot(obs[1]) > env.config.target_radius);
            assert_eq!(&obs[2..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let a = easy(7).reset(None).unwrap();
        let b = easy(7).reset(None).unwrap();
        assert_eq!(a, b);
        let mut env = easy(1);
        assert_eq!(env.reset(Some(7)).unwrap(), a);
    }

    #[test]
    fn one_euler_step() {
        let mut env = easy(0);
        env.set_state([0.5, 0.5], [0.0, 0.0]);
        let step = env.step(&[1.0, 0.0]).unwrap();
        assert!((step.observation[2] - 0.05).abs() < 1e-15);
        assert!((step.observation[0] - 0.5025).abs() < 1e-15);
        assert_eq!(step.observation[1], 0.5);
        assert_eq!(step.reward, -1.0);
        // from the origin with a target elsewhere
        let mut cfg = DotReacherConfig::easy();
        cfg.target = [0.8, 0.8];
        let mut env = DotReacher::new(cfg, 0).unwrap();
        env.set_state([0.0, 0.0], [0.0, 0.0]);
        let step = env.step(&[1.0, 0.0]).unwrap();
        let expected = [0.0025, 0.0, 0.05, 0.0];
        for (o, e) in step.observation.iter().zip(expected) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn parked_on_target_terminates() {
        let mut env = easy(0);
        env.set_state([0.0, 0.0], [0.0, 0.0]);
        let step = env.step(&[0.0, 0.0]).unwrap();
        assert!(step.terminal);
        assert_eq!(step.reward, 0.0);
        assert!(matches!(env.step(&[0.0, 0.0]), Err(EnvError::Usage(_))));
    }

    #[test]
    fn fast_pass_is_not_terminal() {
        let mut env = easy(0);
        env.set_state([0.0, 0.0], [1.0, 0.0]);
        assert!(!env.step(&[0.0, 0.0]).unwrap().terminal);
    }

    #[test]
    fn idle_dot_truncates() {
        let mut env = easy(3);
        env.reset(None).unwrap();
        let mut steps = 0;
        loop {
            let s = env.step(&[0.0, 0.0]).unwrap();
            steps += 1;
            assert!(!s.terminal);
            if s.truncated {
                break;
            }
        }
        assert_eq!(steps, 500);
    }

    #[test]
    fn constant_velocity_without_action() {
        let mut env = easy(0);
        env.set_state([-0.9, -0.9], [0.3, 0.2]);
        for _ in 0..20 {
            let s = env.step(&[0.0, 0.0]).unwrap();
            assert_eq!(&s.observation[2..], &[0.3, 0.2]);
        }
    }

    #[test]
    fn walls_are_inelastic() {
        let mut env = easy(0);
        env.set_state([0.99, 0.0], [1.0, 0.1]);
        let s = env.step(&[1.0, 0.0]).unwrap();
        assert_eq!(s.observation[0], 1.0);
        assert_eq!(s.observation[2], 0.0);
        assert!(s.observation[3] > 0.0);
    }

    #[test]
    fn actions_are_clamped_and_checked() {
        let mut env = easy(0);
        env.set_state([0.5, 0.5], [0.0, 0.0]);
        let s = env.step(&[10.0, -10.0]).unwrap();
        assert!((s.observation[2] - 0.05).abs() < 1e-15);
        assert!((s.observation[3] + 0.05).abs() < 1e-15);
        assert!(matches!(env.step(&[0.0]), Err(EnvError::ActionDim { .. })));
    }

    #[test]
    fn step_before_reset_is_usage_error() {
        let mut env = easy(0);
        assert!(matches!(env.step(&[0.0, 0.0]), Err(EnvError::Usage(_))));
    }

    #[test]
    fn pd_controller_solves_easy() {
        let mut env = easy(11);
        for _ in 0..200 {
            let mut obs = env.reset(None).unwrap();
            let mut len = 0;
            loop {
                let s = env.step(&dot_reacher_pd_action(&obs, [0.0, 0.0])).unwrap();
                len += 1;
                obs = s.observation;
                if s.terminal {
                    break;
                }
                assert!(!s.truncated, "PD controller timed out");
            }
            assert!(len < 200);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = DotReacherConfig::easy();
        cfg.target_radius = 2.0;
        assert!(DotReacher::new(cfg, 0).is_err());
        let mut cfg = DotReacherConfig::hard();
        cfg.timeout_steps = 0;
        assert!(DotReacher::new(cfg, 0).is_err());
    }

    #[test]
    fn snapshot_restores_trajectory() {
        let mut env = easy(5);
        env.reset(None).unwrap();
        env.step(&[0.3, -0.2]).unwrap();
        let snap = env.snapshot().unwrap();
        let a: Vec<_> = (0..5).map(|_| env.step(&[0.1, 0.1]).unwrap()).collect();
        let mut other = easy(99);
        other.restore(&snap).unwrap();
        let b: Vec<_> = (0..5).map(|_| other.step(&[0.1, 0.1]).unwrap()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn pendulum_runs_and_truncates() {
        let mut env = Pendulum::new(PendulumConfig::default(), 1).unwrap();
        let obs = env.reset(None).unwrap();
        assert_eq!(obs.len(), 3);
        let mut n = 0;
        loop {
            let s = env.step(&[0.5]).unwrap();
            n += 1;
            assert!(s.reward <= 0.0 && !s.terminal);
            if s.truncated {
                break;
            }
        }
        assert_eq!(n, 200);
    }

    #[test]
    fn protocol_roundtrip_over_pipes() {
        let (server_in, client_out) = std::io::pipe().unwrap();
        let (client_in, server_out) = std::io::pipe().unwrap();
        let server = std::thread::spawn(move || {
            let mut env = easy(0);
            serve(&mut env, BufReader::new(server_in), server_out).unwrap();
        });
        let mut client = ProtocolClient::new(BufReader::new(client_in), client_out, Duration::from_secs(5)).unwrap();
        assert_eq!(
            client.spec(),
            EnvSpec {
                obs_dim: 4,
                act_dim: 2
            }
        );
        let mut local = easy(0);
        let obs = client.reset(Some(7)).unwrap();
        assert_eq!(obs, local.reset(Some(7)).unwrap());
        for k in 0..10 {
            let a = [0.1 * k as f64, -0.2];
            assert_eq!(client.step(&a).unwrap(), local.step(&a).unwrap());
        }
        assert!(matches!(client.step(&[0.0]), Err(EnvError::ActionDim { .. })));
        client.close().unwrap();
        server.join().unwrap();
    }

    #[test]
    fn server_answers_malformed_lines() {
        let input = "{\"op\":\"spec\",\"extra\":1}\nnot json\n{\"op\":\"step\",\"action\":[0.1,-0.2]}\n{\"op\":\"reset\",\"seed\":7}\n{\"op\":\"step\",\"action\":[0.1,-0.2]}\n{\"op\":\"close\"}\n";
        let mut out = Vec::new();
        let mut env = easy(0);
        serve(&mut env, input.as_bytes(), &mut out).unwrap();
        let lines: Vec<Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines[0], json!({"obs_dim": 4, "act_dim": 2}));
        assert!(lines[1].get("error").is_some());
        assert!(lines[2].get("error").is_some(), "step before reset");
        assert_eq!(lines[3]["obs"].as_array().unwrap().len(), 4);
        assert_eq!(lines[4]["reward"], json!(-1.0));
        assert_eq!(lines[4]["terminal"], json!(false));
        assert_eq!(lines[4]["truncated"], json!(false));
        assert_eq!(lines[5], json!({"ok": true}));
    }

    #[test]
    fn silent_peer_times_out() {
        let (_keep, client_out) = std::io::pipe().unwrap();
        let (client_in, _server_out) = std::io::pipe().unwrap();
        let err = ProtocolClient::new(BufReader::new(client_in), client_out, Duration::from_millis(50));
        assert!(matches!(err, Err(EnvError::Timeout(_))));
    }

    #[test]
    fn wrong_obs_dim_is_protocol_fault() {
        let (server_in, client_out) = std::io::pipe().unwrap();
        let (client_in, mut server_out) = std::io::pipe().unwrap();
        let t = std::thread::spawn(move || {
            let mut lines = BufReader::new(server_in).lines();
            lines.next();
            writeln!(server_out, "{{\"obs_dim\":4,\"act_dim\":2}}").unwrap();
            lines.next();
            writeln!(server_out, "{{\"obs\":[1.0,2.0]}}").unwrap();
        });
        let mut client = ProtocolClient::new(BufReader::new(client_in), client_out, Duration::from_secs(5)).unwrap();
        assert!(matches!(client.reset(None), Err(EnvError::Protocol(_))));
        t.join().unwrap();
    }
}
