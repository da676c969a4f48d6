//! `avg`: train, sweep, evaluate, run the linear testbed, export defaults and
//! serve built-in environments over the subprocess protocol.
//!
//! Exit codes: 0 completed, 2 diverged, 3 environment fault, 4 config error,
//! 1 anything else.

mod config;

use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use avg_core::env::{self, DotReacherConfig, EnvConfig};
use avg_core::harness::{self, HarnessError, RunConfig, RunStatus, Trainer};
use avg_core::lintest::{self, LintestError, RpgTdConfig, SmallMdp};
use avg_core::sweep::{self, SweepConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;

const EXIT_DIVERGED: u8 = 2;
const EXIT_ENV_FAULT: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "avg", version, about = "Incremental actor-critic training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON config file; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override applied after the file, e.g. `agent.alpha_pi=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one agent.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory for metrics.jsonl, its summary CSV, checkpoint.bin and config.json.
        /// External environments cannot be snapshotted, so they get no checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Random-search hyperparameter sweep.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for manifest.json, results.csv and ranking.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Deterministic evaluation (zero noise) of a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides `eval_episodes`.
        #[arg(long)]
        episodes: Option<u64>,
    },
    /// RPG-TD on a small known MDP; writes per-iteration diagnostics as CSV.
    Lintest {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default config as JSON.
    ExportDefaults {
        #[arg(value_enum, default_value_t = DefaultsKind::Train)]
        kind: DefaultsKind,
    },
    /// Serve a built-in environment on stdin/stdout using the JSON-lines protocol.
    EnvServe {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DefaultsKind {
    Train,
    Sweep,
    Lintest,
    EnvServe,
}

/// Config of the `lintest` subcommand: one run per (batch size, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LintestConfig {
    mdp: SmallMdp,
    /// Template run; `batch_size` and `seed` are replaced from the lists below.
    run: RpgTdConfig,
    batch_sizes: Vec<usize>,
    seeds: Vec<u64>,
}

impl Default for LintestConfig {
    fn default() -> Self {
        LintestConfig {
            mdp: SmallMdp::three_state(),
            run: RpgTdConfig::default(),
            batch_sizes: vec![1, 64],
            seeds: (0..10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EnvServeConfig {
    env: EnvConfig,
    seed: u64,
}

impl Default for EnvServeConfig {
    fn default() -> Self {
        EnvServeConfig {
            env: EnvConfig::DotReacher(DotReacherConfig::easy()),
            seed: 0,
        }
    }
}

/// Error carrying the process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e)
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::Config(_) | HarnessError::CheckpointKind { .. } | HarnessError::CheckpointVersion { .. } => {
                EXIT_CONFIG
            }
            HarnessError::Env(_) => EXIT_ENV_FAULT,
            _ => 1,
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

impl From<LintestError> for Failure {
    fn from(e: LintestError) -> Self {
        let code = match &e {
            LintestError::Io(_) => 1,
            _ => EXIT_CONFIG,
        };
        Failure {
            code,
            error: e.into(),
        }
    }
}

fn load<T>(args: &ConfigArgs) -> Result<T, Failure>
where
    T: Serialize + serde::de::DeserializeOwned + Default,
{
    Ok(config::load(args.config.as_deref(), &args.overrides)?)
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_config_echo<T: Serialize>(dir: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn train(cfg: &ConfigArgs, out: Option<&Path>, resume: Option<&Path>) -> Result<(), Failure> {
    let mut config: RunConfig = load(cfg)?;
    if let Some(dir) = out {
        config.log_path.get_or_insert_with(|| dir.join("metrics.jsonl"));
        if !matches!(config.env, EnvConfig::External { .. }) {
            config.checkpoint_path.get_or_insert_with(|| dir.join("checkpoint.bin"));
        }
        write_config_echo(dir, &config)?;
    }
    config.validate()?;
    eprintln!("effective config: {}", serde_json::to_string(&config).map_err(anyhow::Error::from)?);
    let summary = match resume {
        Some(path) => harness::resume_training(config, path)?,
        None => harness::run_training(config)?,
    };
    let auc = summary.auc.map_or("none".to_string(), |a| format!("{a}"));
    match summary.status {
        RunStatus::Completed => {
            println!("completed steps={} episodes={} auc={auc}", summary.steps, summary.episodes);
            Ok(())
        }
        RunStatus::Diverged { step, reason } => Err(Failure {
            code: EXIT_DIVERGED,
            error: anyhow::anyhow!("diverged at step {step}: {reason}"),
        }),
        RunStatus::Failed { step, reason } => Err(Failure {
            code: EXIT_ENV_FAULT,
            error: anyhow::anyhow!("environment fault at step {step}: {reason}"),
        }),
    }
}

fn run_sweep(cfg: &ConfigArgs, out: Option<&Path>) -> Result<(), Failure> {
    let mut config: SweepConfig = load(cfg)?;
    if let Some(dir) = out {
        config.out_dir = Some(dir.to_path_buf());
        write_config_echo(dir, &config)?;
    }
    config.base.validate()?;
    let output = sweep::run_sweep(&config)?;
    let ranking = output.ranking(config.top_k);
    if let Some(warning) = &ranking.warning {
        eprintln!("warning: {warning}");
    }
    println!("rank,config_id,mean_auc,stderr");
    for (rank, result) in ranking.ranked.iter().enumerate() {
        println!(
            "{},{},{},{}",
            rank + 1,
            result.config_id,
            result.mean_auc.unwrap_or(f64::NAN),
            result.stderr.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn eval(cfg: &ConfigArgs, checkpoint: &Path, episodes: Option<u64>) -> Result<(), Failure> {
    let mut config: RunConfig = load(cfg)?;
    if let Some(n) = episodes {
        config.eval_episodes = n;
    }
    if config.eval_episodes == 0 {
        return Err(Failure::config(anyhow::anyhow!("eval needs at least one episode")));
    }
    config.log_path = None;
    config.summary_path = None;
    config.checkpoint_path = None;
    let ckpt = harness::load_checkpoint(checkpoint, Some(config.agent.kind))?;
    let trainer = Trainer::resume(config.clone(), ckpt)?;
    let mean_return = trainer.evaluate()?;
    print_json(&serde_json::json!({
        "step": trainer.step_count(),
        "episodes": config.eval_episodes,
        "mean_return": mean_return,
    }))?;
    Ok(())
}

fn run_lintest(cfg: &ConfigArgs, out: Option<&Path>) -> Result<(), Failure> {
    let config: LintestConfig = load(cfg)?;
    config.mdp.validate()?;
    let mut runs = Vec::new();
    for &batch_size in &config.batch_sizes {
        for &seed in &config.seeds {
            let run = RpgTdConfig {
                batch_size,
                seed,
                ..config.run.clone()
            };
            let (_, rows) = lintest::run_rpg_td(&config.mdp, &run)?;
            eprintln!(
                "M={batch_size} seed={seed} min_grad_norm_sq={:e} final_tracking_err={:e}",
                lintest::min_grad_norm_sq(&rows),
                rows.last().map_or(f64::NAN, |r| r.tracking_err)
            );
            runs.push((run, rows));
        }
    }
    let refs: Vec<_> = runs.iter().map(|(c, r)| (c, r.as_slice())).collect();
    match out {
        Some(path) => lintest::write_csv_file(path, &refs)?,
        None => lintest::write_csv(io::stdout().lock(), &refs)?,
    }
    Ok(())
}

fn export_defaults(kind: DefaultsKind) -> anyhow::Result<()> {
    match kind {
        DefaultsKind::Train => print_json(&RunConfig::default()),
        DefaultsKind::Sweep => print_json(&SweepConfig::default()),
        DefaultsKind::Lintest => print_json(&LintestConfig::default()),
        DefaultsKind::EnvServe => print_json(&EnvServeConfig::default()),
    }
}

fn env_serve(cfg: &ConfigArgs) -> Result<(), Failure> {
    let config: EnvServeConfig = load(cfg)?;
    let mut env = config.env.build(config.seed).map_err(|e| Failure {
        code: EXIT_CONFIG,
        error: e.into(),
    })?;
    let stdin = io::stdin();
    env::serve(env.as_mut(), stdin.lock(), BufWriter::new(io::stdout().lock())).map_err(|e| Failure {
        code: EXIT_ENV_FAULT,
        error: e.into(),
    })
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { cfg, out, resume } => train(&cfg, out.as_deref(), resume.as_deref()),
        Command::Sweep { cfg, out } => run_sweep(&cfg, out.as_deref()),
        Command::Eval {
            cfg,
            checkpoint,
            episodes,
        } => eval(&cfg, &checkpoint, episodes),
        Command::Lintest { cfg, out } => run_lintest(&cfg, out.as_deref()),
        Command::ExportDefaults { kind } => Ok(export_defaults(kind)?),
        Command::EnvServe { cfg } => env_serve(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
