//! Random hyperparameter search with AUC ranking and divergence filtering.
//!
//! Every configuration is trained on every seed. A configuration that diverges
//! on any seed is dropped from the ranking; the rest are ordered by mean AUC
//! (descending), then standard error (ascending), then id.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, AgentKind};
use crate::harness::{self, HarnessError, RunConfig, RunStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    /// Exponent bounds of the log-uniform actor learning rate.
    pub actor_lr_log10: [f64; 2],
    pub critic_lr_log10: [f64; 2],
    pub beta1: Vec<f64>,
    pub beta2: f64,
    /// Exponent bounds of `alpha_lr`: the fixed entropy coefficient for AVG and
    /// IAC, the entropy-coefficient learning rate for SAC-1.
    pub alpha_lr_log10: [f64; 2],
    pub gamma: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            actor_lr_log10: [-6.0, -2.0],
            critic_lr_log10: [-6.0, -2.0],
            beta1: vec![0.0, 0.9],
            beta2: 0.999,
            alpha_lr_log10: [-5.0, 0.0],
            gamma: vec![0.95, 0.97, 0.99, 0.995, 1.0],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), String> {
        for (name, [lo, hi]) in [
            ("actor_lr_log10", self.actor_lr_log10),
            ("critic_lr_log10", self.critic_lr_log10),
            ("alpha_lr_log10", self.alpha_lr_log10),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(format!("{name} must be an ordered finite pair"));
            }
        }
        if self.beta1.is_empty() || self.gamma.is_empty() {
            return Err("beta1 and gamma need at least one choice".into());
        }
        Ok(())
    }
}

/// One draw from a [`SearchSpace`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
}

impl Hyperparameters {
    /// `base` with the sampled values written in.
    pub fn apply(&self, kind: AgentKind, base: &AgentConfig) -> AgentConfig {
        let mut c = base.clone();
        c.alpha_pi = self.actor_lr;
        c.alpha_q = self.critic_lr;
        c.beta1 = self.beta1;
        c.beta2 = self.beta2;
        c.gamma = self.gamma;
        match kind {
            AgentKind::Sac1 => c.eta_lr = self.alpha_lr,
            AgentKind::Avg | AgentKind::AvgTarget | AgentKind::Iac => c.eta = self.alpha_lr,
        }
        c
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    let e = if lo == hi { lo } else { rng.random_range(lo..hi) };
    10f64.powf(e)
}

fn choose<R: Rng + ?Sized>(rng: &mut R, options: &[f64]) -> f64 {
    options[rng.random_range(0..options.len())]
}

pub fn sample_hyperparameters<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Hyperparameters {
    Hyperparameters {
        actor_lr: log_uniform(rng, space.actor_lr_log10),
        critic_lr: log_uniform(rng, space.critic_lr_log10),
        beta1: choose(rng, &space.beta1),
        beta2: space.beta2,
        alpha_lr: log_uniform(rng, space.alpha_lr_log10),
        gamma: choose(rng, &space.gamma),
    }
}

pub fn sample_config<R: Rng + ?Sized>(space: &SearchSpace, kind: AgentKind, base: &AgentConfig, rng: &mut R) -> AgentConfig {
    sample_hyperparameters(space, rng).apply(kind, base)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub auc: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config_id: usize,
    pub hyperparameters: Hyperparameters,
    /// One entry per seed, in seed order.
    pub outcomes: Vec<RunOutcome>,
    /// Over completed (non-diverged, with at least one episode) runs only.
    pub mean_auc: Option<f64>,
    pub stderr: Option<f64>,
    pub diverged_any: bool,
}

impl SweepResult {
    pub fn new(config_id: usize, hyperparameters: Hyperparameters, outcomes: Vec<RunOutcome>) -> Self {
        let aucs: Vec<f64> = outcomes
            .iter()
            .filter(|o| !o.diverged)
            .filter_map(|o| o.auc)
            .collect();
        let (mean_auc, stderr) = mean_and_stderr(&aucs);
        SweepResult {
            config_id,
            hyperparameters,
            diverged_any: outcomes.iter().any(|o| o.diverged),
            outcomes,
            mean_auc,
            stderr,
        }
    }
}

/// Sample mean and standard error (n - 1 denominator; 0 for a single value).
pub fn mean_and_stderr(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (Some(mean), Some(0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking<'a> {
    pub ranked: Vec<&'a SweepResult>,
    pub warning: Option<String>,
}

pub fn rank_configs(results: &[SweepResult], top_k: Option<usize>) -> Ranking<'_> {
    let mut ranked: Vec<&SweepResult> = results
        .iter()
        .filter(|r| !r.diverged_any && r.mean_auc.is_some())
        .collect();
    ranked.sort_by(|a, b| {
        let key = |r: &SweepResult| (r.mean_auc.unwrap_or(f64::NEG_INFINITY), r.stderr.unwrap_or(f64::INFINITY));
        let (ma, sa) = key(a);
        let (mb, sb) = key(b);
        mb.total_cmp(&ma)
            .then(sa.total_cmp(&sb))
            .then(a.config_id.cmp(&b.config_id))
    });
    if let Some(k) = top_k {
        ranked.truncate(k);
    }
    let warning = (ranked.is_empty() && !results.is_empty())
        .then(|| "every configuration diverged or produced no episodes; nothing to rank".to_string());
    Ranking { ranked, warning }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Template for every run; its agent hyperparameters are overwritten by draws.
    pub base: RunConfig,
    pub space: SearchSpace,
    pub num_configs: usize,
    pub seeds: Vec<u64>,
    /// Seeds the hyperparameter draws.
    pub sweep_seed: u64,
    pub workers: usize,
    pub out_dir: Option<PathBuf>,
    /// Keep per-run metric logs under `out_dir/runs`.
    pub keep_run_logs: bool,
    pub top_k: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            base: RunConfig::default(),
            space: SearchSpace::default(),
            num_configs: 30,
            seeds: (0..5).collect(),
            sweep_seed: 0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            out_dir: None,
            keep_run_logs: false,
            top_k: Some(25),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub config_id: usize,
    pub hyperparameters: Hyperparameters,
    pub agent_config: AgentConfig,
}

/// Everything needed to replay a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub agent: AgentKind,
    pub space: SearchSpace,
    pub seeds: Vec<u64>,
    pub sweep_seed: u64,
    pub total_steps: u64,
    pub configs: Vec<ManifestEntry>,
}

pub fn build_manifest(config: &SweepConfig) -> SweepManifest {
    let mut rng = ChaCha8Rng::seed_from_u64(config.sweep_seed);
    let kind = config.base.agent.kind;
    let configs = (0..config.num_configs)
        .map(|config_id| {
            let hyperparameters = sample_hyperparameters(&config.space, &mut rng);
            ManifestEntry {
                config_id,
                hyperparameters,
                agent_config: hyperparameters.apply(kind, &config.base.agent.config),
            }
        })
        .collect();
    SweepManifest {
        agent: kind,
        space: config.space.clone(),
        seeds: config.seeds.clone(),
        sweep_seed: config.sweep_seed,
        total_steps: config.base.total_steps,
        configs,
    }
}

/// The run config for one (configuration, seed) job.
pub fn job_config(config: &SweepConfig, entry: &ManifestEntry, seed: u64) -> RunConfig {
    let mut run = config.base.clone();
    run.agent.config = entry.agent_config.clone();
    run.seed = seed;
    run.checkpoint_path = None;
    run.checkpoint_every = 0;
    run.summary_path = None;
    run.log_path = match (&config.out_dir, config.keep_run_logs) {
        (Some(dir), true) => Some(dir.join("runs").join(format!("config{}_seed{}.jsonl", entry.config_id, seed))),
        _ => None,
    };
    run
}

#[derive(Debug, Clone, Serialize)]
struct ResultCsvRow {
    config_id: usize,
    seed: u64,
    auc: Option<f64>,
    diverged: bool,
}

#[derive(Debug, Clone, Serialize)]
struct RankingCsvRow {
    rank: usize,
    config_id: usize,
    mean_auc: f64,
    stderr: f64,
    actor_lr: f64,
    critic_lr: f64,
    beta1: f64,
    alpha_lr: f64,
    gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub manifest: SweepManifest,
    pub results: Vec<SweepResult>,
}

impl SweepOutput {
    pub fn ranking(&self, top_k: Option<usize>) -> Ranking<'_> {
        rank_configs(&self.results, top_k)
    }
}

/// Runs the sweep with the real training harness.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepOutput, HarnessError> {
    run_sweep_with(config, |run| {
        let summary = harness::run_training(run.clone())?;
        match summary.status {
            RunStatus::Failed { reason, .. } => Err(HarnessError::Config(format!("run failed: {reason}"))),
            status => Ok(RunOutcome {
                auc: summary.auc,
                diverged: matches!(status, RunStatus::Diverged { .. }),
            }),
        }
    })
}

/// Runs the sweep with a caller-supplied runner on a bounded worker pool.
/// Results are ordered by configuration id and seed regardless of scheduling.
pub fn run_sweep_with<F>(config: &SweepConfig, runner: F) -> Result<SweepOutput, HarnessError>
where
    F: Fn(&RunConfig) -> Result<RunOutcome, HarnessError> + Sync,
{
    config.space.validate().map_err(HarnessError::Config)?;
    if config.seeds.is_empty() {
        return Err(HarnessError::Config("a sweep needs at least one seed".into()));
    }
    let manifest = build_manifest(config);
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.clone(),
            source,
        })?;
        write_json(&dir.join("manifest.json"), &manifest)?;
    }

    let jobs: Vec<(usize, usize)> = (0..manifest.configs.len())
        .flat_map(|c| (0..config.seeds.len()).map(move |s| (c, s)))
        .collect();
    let slots: Vec<Mutex<Option<Result<RunOutcome, HarnessError>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.workers.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(c, s)) = jobs.get(i) else { break };
                let run = job_config(config, &manifest.configs[c], config.seeds[s]);
                *slots[i].lock().expect("result slot") = Some(runner(&run));
            });
        }
    });

    let mut outcomes: Vec<Vec<RunOutcome>> = vec![Vec::new(); manifest.configs.len()];
    for ((c, _), slot) in jobs.iter().zip(slots) {
        let outcome = slot.into_inner().expect("result slot").expect("every job ran")?;
        outcomes[*c].push(outcome);
    }
    let results: Vec<SweepResult> = manifest
        .configs
        .iter()
        .zip(outcomes)
        .map(|(e, o)| SweepResult::new(e.config_id, e.hyperparameters, o))
        .collect();

    let output = SweepOutput { manifest, results };
    if let Some(dir) = &config.out_dir {
        write_results(dir, &output, config.top_k)?;
    }
    Ok(output)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_results(dir: &Path, output: &SweepOutput, top_k: Option<usize>) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
    for r in &output.results {
        for (o, seed) in r.outcomes.iter().zip(&output.manifest.seeds) {
            w.serialize(ResultCsvRow {
                config_id: r.config_id,
                seed: *seed,
                auc: o.auc,
                diverged: o.diverged,
            })?;
        }
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: dir.join("results.csv"),
        source,
    })?;
    let mut w = csv::Writer::from_path(dir.join("ranking.csv"))?;
    for (rank, r) in output.ranking(top_k).ranked.iter().enumerate() {
        let h = r.hyperparameters;
        w.serialize(RankingCsvRow {
            rank: rank + 1,
            config_id: r.config_id,
            mean_auc: r.mean_auc.unwrap_or(f64::NAN),
            stderr: r.stderr.unwrap_or(f64::NAN),
            actor_lr: h.actor_lr,
            critic_lr: h.critic_lr,
            beta1: h.beta1,
            alpha_lr: h.alpha_lr,
            gamma: h.gamma,
        })?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: dir.join("ranking.csv"),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp() -> Hyperparameters {
        sample_hyperparameters(&SearchSpace::default(), &mut ChaCha8Rng::seed_from_u64(0))
    }

    fn result(id: usize, aucs: &[f64], diverged_on: Option<usize>) -> SweepResult {
        let outcomes = aucs
            .iter()
            .enumerate()
            .map(|(i, &a)| RunOutcome {
                auc: Some(a),
                diverged: diverged_on == Some(i),
            })
            .collect();
        SweepResult::new(id, hp(), outcomes)
    }

    #[test]
    fn diverged_config_excluded() {
        let results = vec![result(0, &[-5.0, -5.0], None), result(1, &[-3.0, -3.0], Some(1))];
        let r = rank_configs(&results, None);
        assert_eq!(r.ranked.iter().map(|r| r.config_id).collect::<Vec<_>>(), vec![0]);
        assert!(r.warning.is_none());
    }

    #[test]
    fn sorted_by_mean_then_stderr_then_id() {
        let results = vec![result(0, &[-5.0, -5.0], None), result(1, &[-3.0, -3.0], None)];
        let ids: Vec<_> = rank_configs(&results, None).ranked.iter().map(|r| r.config_id).collect();
        assert_eq!(ids, vec![1, 0]);

        let mut a = result(0, &[-1.0, -1.0], None);
        let mut b = result(1, &[-1.0, -1.0], None);
        a.stderr = Some(0.2);
        b.stderr = Some(0.1);
        let results = vec![a, b];
        let ids: Vec<_> = rank_configs(&results, None).ranked.iter().map(|r| r.config_id).collect();
        assert_eq!(ids, vec![1, 0]);

        let results = vec![result(4, &[-2.0], None), result(2, &[-2.0], None)];
        let ids: Vec<_> = rank_configs(&results, None).ranked.iter().map(|r| r.config_id).collect();
        assert_eq!(ids, vec![2, 4]);
    }

    #[test]
    fn all_diverged_warns() {
        let results = vec![result(0, &[-1.0], Some(0))];
        let r = rank_configs(&results, Some(5));
        assert!(r.ranked.is_empty());
        assert!(r.warning.is_some());
    }

    #[test]
    fn stats_ignore_diverged_seeds() {
        let r = result(0, &[-2.0, -4.0, f64::NAN], Some(2));
        assert_eq!(r.mean_auc, Some(-3.0));
        assert!((r.stderr.unwrap() - 1.0).abs() < 1e-15);
        assert!(r.diverged_any);
    }

    #[test]
    fn alpha_lr_routing() {
        let h = hp();
        let base = AgentConfig::default();
        assert_eq!(h.apply(AgentKind::Avg, &base).eta, h.alpha_lr);
        assert_eq!(h.apply(AgentKind::Avg, &base).eta_lr, base.eta_lr);
        let sac = h.apply(AgentKind::Sac1, &base);
        assert_eq!(sac.eta_lr, h.alpha_lr);
        assert_eq!(sac.eta, base.eta);
    }

    #[test]
    fn same_seed_same_draws() {
        let a = sample_hyperparameters(&SearchSpace::default(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_hyperparameters(&SearchSpace::default(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn results_ordered_independent_of_workers() {
        let make = |workers| SweepConfig {
            num_configs: 4,
            seeds: vec![1, 2, 3],
            workers,
            out_dir: None,
            ..SweepConfig::default()
        };
        let runner = |run: &RunConfig| {
            Ok(RunOutcome {
                auc: Some(-(run.agent.config.alpha_pi.log10()) * run.seed as f64),
                diverged: false,
            })
        };
        let one = run_sweep_with(&make(1), runner).unwrap();
        let four = run_sweep_with(&make(4), runner).unwrap();
        assert_eq!(one, four);
    }
}
