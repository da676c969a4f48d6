//! Seeded training loop, metric logging and checkpoints.
//!
//! A run writes one JSON object per line to its metric log: a row at every
//! episode end, a diagnostic row every `diag_every` steps, optional evaluation
//! rows, and a final `diverged` row if the learner produced a non-finite update.
//! A one-line CSV summary is written when the run stops.
//!
//! Checkpoints are binary files made of length-prefixed sections so that
//! parameter and optimizer vectors round-trip bit-exactly. Resuming from a
//! checkpoint continues the run exactly as if it had never stopped, provided
//! the metric log from the interrupted run is appended to.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agents::{Agent, AgentConfig, AgentError, AgentKind, AgentSetup, IncrementalAgent, UpdateDiagnostics};
use crate::env::{DotReacherConfig, Env, EnvConfig, EnvError, EnvStep};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"AVGCKPT\0";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("malformed checkpoint: {0}")]
    CheckpointSchema(String),
    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint holds a {found} agent but the run config asks for {expected}")]
    CheckpointKind { found: String, expected: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub agent: AgentSetup,
    pub env: EnvConfig,
    pub total_steps: u64,
    /// Evaluate the deterministic policy every this many steps; 0 disables.
    pub eval_every: u64,
    pub eval_episodes: u64,
    pub log_path: Option<PathBuf>,
    /// Defaults to the log path with a `.summary.csv` suffix.
    pub summary_path: Option<PathBuf>,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    /// Seeds the agent, the environment and evaluation; overrides `agent.seed`.
    pub seed: u64,
    pub diag_every: u64,
    /// Multiplies rewards before the agent sees them. Logged returns stay unscaled.
    pub reward_scale: f64,
    /// Fill `wall_ms` in metric rows. Off keeps logs byte-identical across runs.
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            agent: AgentSetup::default(),
            env: EnvConfig::DotReacher(DotReacherConfig::easy()),
            total_steps: 100_000,
            eval_every: 0,
            eval_episodes: 5,
            log_path: None,
            summary_path: None,
            checkpoint_every: 0,
            checkpoint_path: None,
            seed: 0,
            diag_every: 1000,
            reward_scale: 1.0,
            record_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.reward_scale.is_finite() && self.reward_scale > 0.0) {
            return Err(HarnessError::Config("reward_scale must be positive and finite".into()));
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return Err(HarnessError::Config("eval_episodes must be positive when eval_every is set".into()));
        }
        self.agent
            .config
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    fn resolved_summary_path(&self) -> Option<PathBuf> {
        self.summary_path.clone().or_else(|| {
            self.log_path.as_ref().map(|p| {
                let mut s = p.clone().into_os_string();
                s.push(".summary.csv");
                PathBuf::from(s)
            })
        })
    }
}

/// Independent seed for stream `stream` of run seed `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Episode,
    Diagnostic,
    Eval,
    Diverged,
}

/// One line of the metric log.
///
/// Episode rows carry the episode's mean gradient norms; diagnostic rows carry
/// the mean over the preceding diagnostic window. `delta`, `delta_scaled`,
/// `sigma_delta` and `q_value` are from the most recent update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub schema: u32,
    pub kind: RowKind,
    pub step: u64,
    pub episode: u64,
    pub episodic_return: Option<f64>,
    pub episode_length: Option<u64>,
    pub actor_grad_norm: Option<f64>,
    pub critic_grad_norm: Option<f64>,
    pub delta: Option<f64>,
    pub delta_scaled: Option<f64>,
    pub sigma_delta: Option<f64>,
    pub q_value: Option<f64>,
    pub wall_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl MetricRow {
    fn blank(kind: RowKind, step: u64, episode: u64) -> Self {
        MetricRow {
            schema: METRICS_SCHEMA_VERSION,
            kind,
            step,
            episode,
            episodic_return: None,
            episode_length: None,
            actor_grad_norm: None,
            critic_grad_norm: None,
            delta: None,
            delta_scaled: None,
            sigma_delta: None,
            q_value: None,
            wall_ms: None,
            reason: None,
        }
    }
}

/// Mean episodic return over the episode rows, `None` without episodes.
pub fn compute_auc(rows: &[MetricRow]) -> Option<f64> {
    let returns: Vec<f64> = rows
        .iter()
        .filter(|r| r.kind == RowKind::Episode)
        .filter_map(|r| r.episodic_return)
        .collect();
    (!returns.is_empty()).then(|| returns.iter().sum::<f64>() / returns.len() as f64)
}

/// Reads a metric log written by [`run_training`].
pub fn read_metric_log(path: &Path) -> Result<Vec<MetricRow>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::Config(format!("bad metric row: {e}"))))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NormAccumulator {
    pub n: u64,
    pub actor_sum: f64,
    pub critic_sum: f64,
}

impl NormAccumulator {
    fn add(&mut self, d: &UpdateDiagnostics) {
        self.n += 1;
        self.actor_sum += d.actor_grad_norm;
        self.critic_sum += d.critic_grad_norm;
    }

    fn means(&self) -> (Option<f64>, Option<f64>) {
        if self.n == 0 {
            (None, None)
        } else {
            let n = self.n as f64;
            (Some(self.actor_sum / n), Some(self.critic_sum / n))
        }
    }
}

/// Loop bookkeeping carried across checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub step: u64,
    pub episode: u64,
    pub in_episode: bool,
    pub episode_return: f64,
    pub episode_length: u64,
    pub episode_norms: NormAccumulator,
    pub window_norms: NormAccumulator,
    pub last: Option<UpdateDiagnostics>,
    pub return_sum: f64,
    pub return_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { step: u64, reason: String },
    /// The environment failed; distinct from divergence.
    Failed { step: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub status: RunStatus,
    pub steps: u64,
    pub episodes: u64,
    /// Mean episodic return over the whole run, including any part before a resume.
    pub auc: Option<f64>,
    /// Rows produced by this process.
    pub rows: Vec<MetricRow>,
}

impl RunSummary {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    pub fn episode_returns(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.kind == RowKind::Episode)
            .filter_map(|r| r.episodic_return)
            .collect()
    }
}

#[derive(Debug, Serialize)]
struct SummaryCsvRow<'a> {
    agent: &'a str,
    seed: u64,
    total_steps: u64,
    steps: u64,
    episodes: u64,
    auc: Option<f64>,
    status: &'a str,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub agent: IncrementalAgent,
    pub env_state: Value,
    pub loop_state: LoopState,
}

fn push_section(out: &mut Vec<u8>, tag: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
}

fn encode_blocks(blocks: &[&mut Vec<f64>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(blocks.len() as u64).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        for v in b.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], HarnessError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| HarnessError::CheckpointSchema(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_blocks(bytes: &[u8], targets: Vec<&mut Vec<f64>>, what: &str) -> Result<(), HarnessError> {
    let mut c = Cursor { bytes, pos: 0 };
    let count = c.u64(what)? as usize;
    if count != targets.len() {
        return Err(HarnessError::CheckpointSchema(format!(
            "{what}: {count} blocks, expected {}",
            targets.len()
        )));
    }
    for (i, target) in targets.into_iter().enumerate() {
        let len = c.u64(what)? as usize;
        if len != target.len() {
            return Err(HarnessError::CheckpointSchema(format!(
                "{what} block {i}: length {len}, expected {}",
                target.len()
            )));
        }
        let raw = c.take(len.checked_mul(8).unwrap_or(usize::MAX), what)?;
        for (dst, chunk) in target.iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if !c.done() {
        return Err(HarnessError::CheckpointSchema(format!("{what}: trailing bytes")));
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("checkpoint state serializes")
}

fn from_json<T: for<'de> Deserialize<'de>>(bytes: &[u8], what: &str) -> Result<T, HarnessError> {
    serde_json::from_slice(bytes).map_err(|e| HarnessError::CheckpointSchema(format!("{what}: {e}")))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    agent_kind: AgentKind,
}

/// Serializes a checkpoint. Sections: `META` (format and agent kind), `PARM`
/// and `OPTM` (raw little-endian f64 blocks), `STAT` (normalization
/// statistics), `RNG ` (generator state), `AGNT` (remaining learner state with
/// its vectors stripped), `ENV ` and `LOOP`.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut skeleton = ckpt.agent.clone();
    let (params, moments) = skeleton.blocks_mut();
    let parm = encode_blocks(&params);
    let optm = encode_blocks(&moments);
    for b in params.into_iter().chain(moments) {
        *b = vec![0.0; b.len()];
    }
    let mut agent_json = serde_json::to_value(&skeleton).expect("agent serializes");
    let obj = agent_json.as_object_mut().expect("agent is a JSON object");
    let stats = serde_json::json!({
        "obs_stat": obj.remove("obs_stat"),
        "td_scale": obj.remove("td_scale"),
    });
    let rng = obj.remove("rng").expect("agent has an rng");
    strip_vectors(&mut agent_json);

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        agent_kind: ckpt.agent.kind,
    };
    push_section(&mut out, b"META", &to_json(&meta));
    push_section(&mut out, b"PARM", &parm);
    push_section(&mut out, b"OPTM", &optm);
    push_section(&mut out, b"STAT", &to_json(&stats));
    push_section(&mut out, b"RNG ", &to_json(&rng));
    push_section(&mut out, b"AGNT", &to_json(&agent_json));
    push_section(&mut out, b"ENV ", &to_json(&ckpt.env_state));
    push_section(&mut out, b"LOOP", &to_json(&ckpt.loop_state));
    out
}

/// Replaces the zeroed vectors with their lengths so the skeleton stays small.
fn strip_vectors(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for (key, item) in map.iter_mut() {
                if matches!(key.as_str(), "values" | "m" | "v") {
                    if let Value::Array(a) = item {
                        if a.iter().all(|x| x.as_f64() == Some(0.0)) {
                            *item = serde_json::json!({ "zeros": a.len() });
                            continue;
                        }
                    }
                }
                strip_vectors(item);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(strip_vectors),
        _ => {}
    }
}

fn unstrip_vectors(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for (key, item) in map.iter_mut() {
                if matches!(key.as_str(), "values" | "m" | "v") {
                    if let Some(n) = item.get("zeros").and_then(Value::as_u64) {
                        *item = Value::Array(vec![Value::from(0.0); n as usize]);
                        continue;
                    }
                }
                unstrip_vectors(item);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(unstrip_vectors),
        _ => {}
    }
}

/// Parses a checkpoint, refusing other format versions and, when
/// `expected_kind` is given, checkpoints of a different agent kind.
pub fn decode_checkpoint(bytes: &[u8], expected_kind: Option<AgentKind>) -> Result<Checkpoint, HarnessError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(HarnessError::CheckpointSchema("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(HarnessError::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut sections = std::collections::BTreeMap::new();
    while !c.done() {
        let tag: [u8; 4] = c.take(4, "section tag")?.try_into().expect("4 bytes");
        let len = c.u64("section length")? as usize;
        sections.insert(tag, c.take(len, &String::from_utf8_lossy(&tag))?);
    }
    let section = |tag: &[u8; 4]| {
        sections
            .get(tag)
            .copied()
            .ok_or_else(|| HarnessError::CheckpointSchema(format!("missing section {}", String::from_utf8_lossy(tag))))
    };
    let meta: CheckpointMeta = from_json(section(b"META")?, "META")?;
    if meta.format_version != version {
        return Err(HarnessError::CheckpointSchema("header and META disagree on the version".into()));
    }
    if let Some(expected) = expected_kind {
        if expected != meta.agent_kind {
            return Err(HarnessError::CheckpointKind {
                found: meta.agent_kind.name().into(),
                expected: expected.name().into(),
            });
        }
    }
    let mut agent_json: Value = from_json(section(b"AGNT")?, "AGNT")?;
    unstrip_vectors(&mut agent_json);
    let stats: Value = from_json(section(b"STAT")?, "STAT")?;
    let rng: Value = from_json(section(b"RNG ")?, "RNG")?;
    let obj = agent_json
        .as_object_mut()
        .ok_or_else(|| HarnessError::CheckpointSchema("AGNT is not an object".into()))?;
    for key in ["obs_stat", "td_scale"] {
        obj.insert(key.into(), stats.get(key).cloned().unwrap_or(Value::Null));
    }
    obj.insert("rng".into(), rng);
    let mut agent: IncrementalAgent = serde_json::from_value(agent_json)
        .map_err(|e| HarnessError::CheckpointSchema(format!("agent state: {e}")))?;
    if agent.kind != meta.agent_kind {
        return Err(HarnessError::CheckpointSchema("agent state and META disagree on the kind".into()));
    }
    let (params, moments) = agent.blocks_mut();
    decode_blocks(section(b"PARM")?, params, "PARM")?;
    decode_blocks(section(b"OPTM")?, moments, "OPTM")?;
    Ok(Checkpoint {
        agent,
        env_state: from_json(section(b"ENV ")?, "ENV")?,
        loop_state: from_json(section(b"LOOP")?, "LOOP")?,
    })
}

/// Writes atomically through a temporary file in the same directory.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), HarnessError> {
    let bytes = encode_checkpoint(ckpt);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path, expected_kind: Option<AgentKind>) -> Result<Checkpoint, HarnessError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes, expected_kind)
}

/// A training run in progress.
pub struct Trainer {
    config: RunConfig,
    agent: Box<dyn Agent>,
    env: Box<dyn Env>,
    state: LoopState,
    sink: Option<BufWriter<File>>,
    rows: Vec<MetricRow>,
    started: Instant,
    status: Option<RunStatus>,
}

impl Trainer {
    /// Builds the environment and agent described by `config`.
    pub fn new(config: RunConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let env = config.env.build(derive_seed(config.seed, 1))?;
        let agent_config = AgentConfig {
            seed: config.seed,
            ..config.agent.config.clone()
        };
        let agent = IncrementalAgent::new(config.agent.kind, agent_config, env.spec())?;
        Self::with_parts(config, Box::new(agent), env)
    }

    /// Runs `agent` on `env` under `config`'s loop settings.
    pub fn with_parts(config: RunConfig, agent: Box<dyn Agent>, env: Box<dyn Env>) -> Result<Self, HarnessError> {
        config.validate()?;
        let sink = open_log(config.log_path.as_deref(), false)?;
        Ok(Trainer {
            config,
            agent,
            env,
            state: LoopState::default(),
            sink,
            rows: Vec::new(),
            started: Instant::now(),
            status: None,
        })
    }

    /// Continues from `ckpt`, appending to the existing metric log.
    pub fn resume(config: RunConfig, ckpt: Checkpoint) -> Result<Self, HarnessError> {
        config.validate()?;
        if ckpt.agent.kind != config.agent.kind {
            return Err(HarnessError::CheckpointKind {
                found: ckpt.agent.kind.name().into(),
                expected: config.agent.kind.name().into(),
            });
        }
        let mut env = config.env.build(derive_seed(config.seed, 1))?;
        env.restore(&ckpt.env_state)?;
        let sink = open_log(config.log_path.as_deref(), true)?;
        Ok(Trainer {
            config,
            agent: Box::new(ckpt.agent),
            env,
            state: ckpt.loop_state,
            sink,
            rows: Vec::new(),
            started: Instant::now(),
            status: None,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn agent(&self) -> &dyn Agent {
        self.agent.as_ref()
    }

    pub fn checkpoint(&self) -> Result<Checkpoint, HarnessError> {
        let agent = self
            .agent
            .snapshot()
            .ok_or_else(|| HarnessError::Config("this agent cannot be checkpointed".into()))?;
        Ok(Checkpoint {
            agent,
            env_state: self.env.snapshot()?,
            loop_state: self.state.clone(),
        })
    }

    fn wall_ms(&self) -> Option<f64> {
        self.config
            .record_wall_time
            .then(|| self.started.elapsed().as_secs_f64() * 1e3)
    }

    fn emit(&mut self, mut row: MetricRow) -> Result<(), HarnessError> {
        row.wall_ms = self.wall_ms();
        if let Some(sink) = &mut self.sink {
            let path = self.config.log_path.as_deref().unwrap_or(Path::new(""));
            serde_json::to_writer(&mut *sink, &row).map_err(|e| HarnessError::Io {
                path: path.to_path_buf(),
                source: e.into(),
            })?;
            sink.write_all(b"\n").map_err(io_err(path))?;
        }
        self.rows.push(row);
        Ok(())
    }

    fn fill_last(&self, row: &mut MetricRow) {
        if let Some(d) = &self.state.last {
            row.delta = Some(d.delta);
            row.delta_scaled = Some(d.delta_scaled);
            row.sigma_delta = Some(d.sigma_delta);
            row.q_value = Some(d.q_value);
        }
    }

    /// Advances until `target` total steps or until the run stops.
    pub fn run_until(&mut self, target: u64) -> Result<Option<RunStatus>, HarnessError> {
        while self.status.is_none() && self.state.step < target {
            if let Err(e) = self.one_step() {
                match e {
                    StepFault::Diverged(reason) => {
                        let mut row = MetricRow::blank(RowKind::Diverged, self.state.step, self.state.episode);
                        row.reason = Some(reason.clone());
                        self.emit(row)?;
                        self.status = Some(RunStatus::Diverged {
                            step: self.state.step,
                            reason,
                        });
                    }
                    StepFault::Env(err) => {
                        self.status = Some(RunStatus::Failed {
                            step: self.state.step,
                            reason: err.to_string(),
                        });
                    }
                    StepFault::Harness(err) => return Err(err),
                }
            }
        }
        self.flush()?;
        Ok(self.status.clone())
    }

    fn flush(&mut self) -> Result<(), HarnessError> {
        if let Some(sink) = &mut self.sink {
            let path = self.config.log_path.as_deref().unwrap_or(Path::new(""));
            sink.flush().map_err(io_err(path))?;
        }
        Ok(())
    }

    fn one_step(&mut self) -> Result<(), StepFault> {
        if !self.state.in_episode {
            let obs = self.env.reset(None).map_err(StepFault::Env)?;
            self.agent.begin_episode(&obs)?;
            self.state.in_episode = true;
            self.state.episode_return = 0.0;
            self.state.episode_length = 0;
            self.state.episode_norms = NormAccumulator::default();
        }
        let action = self.agent.act()?;
        let step = self.env.step(&action).map_err(StepFault::Env)?;
        self.state.step += 1;
        self.state.episode_return += step.reward;
        self.state.episode_length += 1;
        let seen = EnvStep {
            reward: step.reward * self.config.reward_scale,
            ..step.clone()
        };
        let diag = self.agent.observe(&seen)?;
        self.state.episode_norms.add(&diag);
        self.state.window_norms.add(&diag);
        self.state.last = Some(diag);

        if step.done() {
            let mut row = MetricRow::blank(RowKind::Episode, self.state.step, self.state.episode);
            row.episodic_return = Some(self.state.episode_return);
            row.episode_length = Some(self.state.episode_length);
            (row.actor_grad_norm, row.critic_grad_norm) = self.state.episode_norms.means();
            self.fill_last(&mut row);
            self.state.return_sum += self.state.episode_return;
            self.state.return_count += 1;
            self.state.episode += 1;
            self.state.in_episode = false;
            self.emit(row)?;
        }
        let step_no = self.state.step;
        if self.config.diag_every > 0 && step_no % self.config.diag_every == 0 {
            let mut row = MetricRow::blank(RowKind::Diagnostic, step_no, self.state.episode);
            (row.actor_grad_norm, row.critic_grad_norm) = self.state.window_norms.means();
            self.fill_last(&mut row);
            self.state.window_norms = NormAccumulator::default();
            self.emit(row)?;
        }
        if self.config.eval_every > 0 && step_no % self.config.eval_every == 0 {
            let mean = self.evaluate().map_err(|e| match e {
                HarnessError::Env(err) => StepFault::Env(err),
                other => StepFault::Harness(other),
            })?;
            let mut row = MetricRow::blank(RowKind::Eval, step_no, self.state.episode);
            row.episodic_return = Some(mean);
            self.emit(row)?;
        }
        if self.config.checkpoint_every > 0 && step_no % self.config.checkpoint_every == 0 {
            self.save_checkpoint_file()?;
        }
        Ok(())
    }

    /// Mean return of the deterministic policy on fresh environments; the
    /// training environment and the agent are left untouched.
    pub fn evaluate(&self) -> Result<f64, HarnessError> {
        let mut env = self
            .config
            .env
            .build(derive_seed(self.config.seed, 2 + self.state.step))?;
        let mut total = 0.0;
        for _ in 0..self.config.eval_episodes {
            let mut obs = env.reset(None)?;
            loop {
                let action = self.agent.act_deterministic(&obs)?;
                let step = env.step(&action)?;
                total += step.reward;
                if step.done() {
                    break;
                }
                obs = step.observation;
            }
        }
        Ok(total / self.config.eval_episodes as f64)
    }

    fn save_checkpoint_file(&mut self) -> Result<(), HarnessError> {
        if let Some(path) = self.config.checkpoint_path.clone() {
            self.flush()?;
            save_checkpoint(&path, &self.checkpoint()?)?;
        }
        Ok(())
    }

    /// Runs to `total_steps`, saves the final checkpoint and writes the CSV summary.
    pub fn run(mut self) -> Result<RunSummary, HarnessError> {
        let status = self.run_until(self.config.total_steps)?.unwrap_or(RunStatus::Completed);
        if status == RunStatus::Completed {
            self.save_checkpoint_file()?;
        }
        let summary = RunSummary {
            status,
            steps: self.state.step,
            episodes: self.state.episode,
            auc: (self.state.return_count > 0).then(|| self.state.return_sum / self.state.return_count as f64),
            rows: std::mem::take(&mut self.rows),
        };
        if let Some(path) = self.config.resolved_summary_path() {
            write_summary_csv(&path, &self.config, &summary)?;
        }
        Ok(summary)
    }
}

enum StepFault {
    Diverged(String),
    Env(EnvError),
    Harness(HarnessError),
}

impl From<AgentError> for StepFault {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Diverged(reason) => StepFault::Diverged(reason),
            other => StepFault::Harness(other.into()),
        }
    }
}

impl From<HarnessError> for StepFault {
    fn from(e: HarnessError) -> Self {
        StepFault::Harness(e)
    }
}

fn open_log(path: Option<&Path>, append: bool) -> Result<Option<BufWriter<File>>, HarnessError> {
    let Some(path) = path else { return Ok(None) };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(io_err(path))?;
    Ok(Some(BufWriter::new(file)))
}

fn write_summary_csv(path: &Path, config: &RunConfig, summary: &RunSummary) -> Result<(), HarnessError> {
    let status = match summary.status {
        RunStatus::Completed => "completed",
        RunStatus::Diverged { .. } => "diverged",
        RunStatus::Failed { .. } => "failed",
    };
    let mut w = csv::Writer::from_path(path)?;
    w.serialize(SummaryCsvRow {
        agent: config.agent.kind.name(),
        seed: config.seed,
        total_steps: config.total_steps,
        steps: summary.steps,
        episodes: summary.episodes,
        auc: summary.auc,
        status,
    })?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Builds and runs the configured training run.
pub fn run_training(config: RunConfig) -> Result<RunSummary, HarnessError> {
    Trainer::new(config)?.run()
}

/// Continues a run from the checkpoint at `path`.
pub fn resume_training(config: RunConfig, path: &Path) -> Result<RunSummary, HarnessError> {
    let ckpt = load_checkpoint(path, Some(config.agent.kind))?;
    Trainer::resume(config, ckpt)?.run()
}
