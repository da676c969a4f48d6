use std::sync::{Arc, Mutex};

use avg_core::agents::{Agent, AgentConfig, AgentError, AgentKind, AgentSetup, IncrementalAgent, UpdateDiagnostics};
use avg_core::env::{DotReacher, DotReacherConfig, Env, EnvError, EnvSpec, EnvStep};
use avg_core::harness::{
    decode_checkpoint, encode_checkpoint, read_metric_log, RowKind, RunConfig, RunStatus, Trainer,
};

fn config(kind: AgentKind, total_steps: u64, seed: u64) -> RunConfig {
    RunConfig {
        agent: AgentSetup {
            kind,
            config: AgentConfig {
                hidden_dims: vec![16, 16],
                ..AgentConfig::default()
            },
        },
        total_steps,
        diag_every: 97,
        eval_every: 700,
        eval_episodes: 1,
        seed,
        ..RunConfig::default()
    }
}

#[test]
fn identical_runs_write_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [AgentKind::Avg, AgentKind::Sac1] {
        let mut logs = Vec::new();
        for name in ["a", "b"] {
            let path = dir.path().join(format!("{}-{name}.jsonl", kind.name()));
            let cfg = RunConfig {
                log_path: Some(path.clone()),
                ..config(kind, 1500, 5)
            };
            let summary = Trainer::new(cfg).unwrap().run().unwrap();
            assert_eq!(summary.status, RunStatus::Completed);
            logs.push(std::fs::read(&path).unwrap());
        }
        assert!(!logs[0].is_empty());
        assert_eq!(logs[0], logs[1], "{} logs differ", kind.name());
    }
}

#[test]
fn different_seeds_write_different_logs() {
    let run = |seed| {
        let summary = Trainer::new(config(AgentKind::Avg, 800, seed)).unwrap().run().unwrap();
        serde_json::to_string(&summary.rows).unwrap()
    };
    assert_ne!(run(1), run(2));
}

#[test]
fn resume_continues_bit_exactly_at_any_step() {
    let dir = tempfile::tempdir().unwrap();
    let total = 1400;
    for kind in [AgentKind::Avg, AgentKind::AvgTarget, AgentKind::Iac, AgentKind::Sac1] {
        let full_log = dir.path().join(format!("{}-full.jsonl", kind.name()));
        let mut full = Trainer::new(RunConfig {
            log_path: Some(full_log.clone()),
            ..config(kind, total, 3)
        })
        .unwrap();
        full.run_until(total).unwrap();
        let reference = full.checkpoint().unwrap();
        drop(full);

        for split in [1, 333, 700, 1399] {
            let log = dir.path().join(format!("{}-{split}.jsonl", kind.name()));
            let cfg = RunConfig {
                log_path: Some(log.clone()),
                ..config(kind, total, 3)
            };
            let mut first = Trainer::new(cfg.clone()).unwrap();
            first.run_until(split).unwrap();
            let bytes = encode_checkpoint(&first.checkpoint().unwrap());
            drop(first);

            let ckpt = decode_checkpoint(&bytes, Some(kind)).unwrap();
            let mut second = Trainer::resume(cfg, ckpt).unwrap();
            second.run_until(total).unwrap();
            let resumed = second.checkpoint().unwrap();
            drop(second);

            assert_eq!(resumed, reference, "{} split at {split}", kind.name());
            assert_eq!(
                std::fs::read(&log).unwrap(),
                std::fs::read(&full_log).unwrap(),
                "{} log split at {split}",
                kind.name()
            );
        }
    }
}

#[test]
fn checkpoint_file_round_trip_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("run.ckpt");
    let cfg = RunConfig {
        checkpoint_path: Some(ckpt_path.clone()),
        checkpoint_every: 250,
        ..config(AgentKind::Avg, 600, 8)
    };
    let summary = Trainer::new(cfg.clone()).unwrap().run().unwrap();
    assert_eq!(summary.status, RunStatus::Completed);
    let ckpt = avg_core::harness::load_checkpoint(&ckpt_path, Some(AgentKind::Avg)).unwrap();
    assert_eq!(ckpt.loop_state.step, 600);
    let resumed = avg_core::harness::resume_training(RunConfig { total_steps: 900, ..cfg }, &ckpt_path).unwrap();
    assert_eq!(resumed.steps, 900);
}

/// Forwards to Dot Reacher and records every reward it hands out.
struct RecordingEnv {
    inner: DotReacher,
    rewards: Arc<Mutex<Vec<Vec<f64>>>>,
}

impl Env for RecordingEnv {
    fn spec(&self) -> EnvSpec {
        self.inner.spec()
    }

    fn reset(&mut self, seed: Option<u64>) -> Result<Vec<f64>, EnvError> {
        self.rewards.lock().unwrap().push(Vec::new());
        self.inner.reset(seed)
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvStep, EnvError> {
        let step = self.inner.step(action)?;
        self.rewards.lock().unwrap().last_mut().unwrap().push(step.reward);
        Ok(step)
    }
}

#[test]
fn logged_returns_equal_environment_reward_sums() {
    let rewards = Arc::new(Mutex::new(Vec::new()));
    let env = RecordingEnv {
        inner: DotReacher::new(
            DotReacherConfig {
                timeout_steps: 60,
                ..DotReacherConfig::easy()
            },
            4,
        )
        .unwrap(),
        rewards: rewards.clone(),
    };
    let cfg = RunConfig {
        reward_scale: 10.0,
        eval_every: 0,
        ..config(AgentKind::Avg, 1000, 4)
    };
    let agent = IncrementalAgent::new(AgentKind::Avg, cfg.agent.config.clone(), env.spec()).unwrap();
    let summary = Trainer::with_parts(cfg, Box::new(agent), Box::new(env)).unwrap().run().unwrap();
    let episodes: Vec<_> = summary.rows.iter().filter(|r| r.kind == RowKind::Episode).collect();
    let recorded = rewards.lock().unwrap();
    assert!(episodes.len() >= 16);
    for (row, rs) in episodes.iter().zip(recorded.iter()) {
        assert_eq!(row.episodic_return.unwrap(), rs.iter().sum::<f64>());
        assert_eq!(row.episode_length.unwrap(), rs.len() as u64);
    }
}

/// Returns a fixed action and reports a non-finite update at a chosen step.
struct FaultyAgent {
    steps: u64,
    fail_at: u64,
}

impl Agent for FaultyAgent {
    fn kind(&self) -> AgentKind {
        AgentKind::Avg
    }

    fn begin_episode(&mut self, _observation: &[f64]) -> Result<(), AgentError> {
        Ok(())
    }

    fn act(&mut self) -> Result<Vec<f64>, AgentError> {
        Ok(vec![0.1, -0.1])
    }

    fn observe(&mut self, _step: &EnvStep) -> Result<UpdateDiagnostics, AgentError> {
        self.steps += 1;
        if self.steps == self.fail_at {
            return Err(AgentError::Diverged("critic gradient norm is NaN".into()));
        }
        Ok(UpdateDiagnostics {
            delta: 0.0,
            delta_scaled: 0.0,
            sigma_delta: 1.0,
            actor_grad_norm: 1.0,
            critic_grad_norm: 1.0,
            q_value: 0.0,
            entropy_term: 0.0,
        })
    }

    fn act_deterministic(&self, _observation: &[f64]) -> Result<Vec<f64>, AgentError> {
        Ok(vec![0.0, 0.0])
    }

    fn diverged(&self) -> bool {
        self.steps >= self.fail_at
    }
}

#[test]
fn injected_nan_stops_the_run_as_diverged() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("faulty.jsonl");
    let cfg = RunConfig {
        log_path: Some(log.clone()),
        eval_every: 0,
        ..config(AgentKind::Avg, 5000, 0)
    };
    let env = DotReacher::new(DotReacherConfig::easy(), 0).unwrap();
    let agent = FaultyAgent { steps: 0, fail_at: 1234 };
    let summary = Trainer::with_parts(cfg, Box::new(agent), Box::new(env)).unwrap().run().unwrap();
    match &summary.status {
        RunStatus::Diverged { step, reason } => {
            assert_eq!(*step, 1234);
            assert!(reason.contains("NaN"));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(summary.diverged());
    let rows = read_metric_log(&log).unwrap();
    let last = rows.last().unwrap();
    assert_eq!(last.kind, RowKind::Diverged);
    assert_eq!(last.step, 1234);
}

/// Fails on a chosen step, like a crashed simulator.
struct BrokenEnv {
    inner: DotReacher,
    steps: u64,
}

impl Env for BrokenEnv {
    fn spec(&self) -> EnvSpec {
        self.inner.spec()
    }

    fn reset(&mut self, seed: Option<u64>) -> Result<Vec<f64>, EnvError> {
        self.inner.reset(seed)
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvStep, EnvError> {
        self.steps += 1;
        if self.steps == 50 {
            return Err(EnvError::Protocol("simulator crashed".into()));
        }
        self.inner.step(action)
    }
}

#[test]
fn environment_fault_is_reported_separately_from_divergence() {
    let cfg = RunConfig {
        eval_every: 0,
        ..config(AgentKind::Avg, 200, 0)
    };
    let env = BrokenEnv {
        inner: DotReacher::new(DotReacherConfig::easy(), 0).unwrap(),
        steps: 0,
    };
    let agent = IncrementalAgent::new(AgentKind::Avg, cfg.agent.config.clone(), env.spec()).unwrap();
    let summary = Trainer::with_parts(cfg, Box::new(agent), Box::new(env)).unwrap().run().unwrap();
    match summary.status {
        RunStatus::Failed { step, reason } => {
            assert_eq!(step, 49);
            assert!(reason.contains("simulator crashed"));
        }
        other => panic!("expected an environment fault, got {other:?}"),
    }
}

fn resident_bytes() -> Option<u64> {
    let statm = std::fs::read_to_string("/proc/self/statm").ok()?;
    let pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    Some(pages * 4096)
}

#[test]
fn memory_stays_flat_over_long_runs() {
    let cfg = RunConfig {
        eval_every: 0,
        diag_every: 5000,
        ..config(AgentKind::Avg, 120_000, 2)
    };
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.run_until(20_000).unwrap();
    let Some(before) = resident_bytes() else { return };
    trainer.run_until(120_000).unwrap();
    let after = resident_bytes().unwrap();
    let growth = after.saturating_sub(before);
    assert!(growth < 8 << 20, "resident set grew by {growth} bytes over 100k steps");
}
