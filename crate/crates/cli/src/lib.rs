//! Command-line surface: train, eval, replay, report and selftest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use iplan::config::{Algorithm, ConfigError, EnvKind, EnvSpec, TrainConfig};
use iplan::log::{EpisodeLog, LogError};
use iplan::metrics::{MetricError, MetricRow, MetricTable};
use iplan::numerics::{Checkpoint, NumericsError};
use iplan::trainer::{evaluate, models_from_checkpoint, EvalEpisode, EvalPolicy, RunManifest, TrainError, Trainer};

pub mod experiments;
pub mod report;
pub mod suites;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_ABORTED: i32 = 5;
pub const EXIT_REPLAY: i32 = 6;

pub const STATS_CSV_HEADER: &str =
    "step,agent,transitions,policy_loss,value_loss,entropy,clip_fraction,behavior_loss,instant_loss";
pub const EPISODES_CSV_HEADER: &str = "episode,step,seed,agent,reward";
pub const CURVE_CSV_HEADER: &str = "step,episodes,reward_mean,reward_hw,speed_mean,speed_hw,survival_mean,survival_hw,success_mean,success_hw";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: String, source: NumericsError },
    #[error("checkpoint {path} does not fit the configuration: {reason}")]
    CheckpointMismatch { path: String, reason: String },
    #[error("{count} module update(s) aborted; first: {first}")]
    Aborted { count: usize, first: String },
    #[error("replay of {path} failed: {source}")]
    Replay { path: String, source: LogError },
    #[error("reading log {path}: {source}")]
    Log { path: String, source: LogError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) | CliError::Train(TrainError::Config(_)) => EXIT_CONFIG,
            CliError::Checkpoint { .. } | CliError::CheckpointMismatch { .. } => EXIT_CHECKPOINT,
            CliError::Aborted { .. } | CliError::Train(TrainError::Policy { .. } | TrainError::Inference { .. }) => {
                EXIT_ABORTED
            }
            CliError::Replay { .. } => EXIT_REPLAY,
            _ => EXIT_OTHER,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Debug, Parser)]
#[command(name = "iplan", version, about = "Decentralized multi-agent driving with incentive inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train agents and write config, manifest, checkpoints, stats and logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the random policy) and write a metric table.
    Eval(EvalArgs),
    /// Re-simulate episode logs and verify them bit for bit.
    Replay(ReplayArgs),
    /// Merge the reward curves of several runs into one CSV.
    Report(ReportArgs),
    /// Cross-check the numerics against the scalar reference oracles.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunFlags {
    /// TOML config, or a manifest.json written by an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// iplan, iplan-bm, iplan-gat or ippo.
    #[arg(long, value_parser = parse_algorithm)]
    pub algo: Option<Algorithm>,
    /// easy or hard (navigation), mild or chaotic (highway).
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Total environment steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Episodes per periodic evaluation.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Checkpoint to evaluate; its run directory supplies the config when
    /// --config is absent.
    #[arg(long, required_unless_present = "random")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate uniformly random actions instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub random: bool,
    #[arg(long, default_value_t = 64)]
    pub episodes: usize,
    /// Directory for metrics.csv and per-episode logs; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(required = true)]
    pub logs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories written by `train`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional SVG rendering of the reward curves.
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Randomized cases per oracle comparison.
    #[arg(long, default_value_t = 1000)]
    pub cases: usize,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    Algorithm::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Algorithm::ALL.iter().map(|a| a.name()).collect();
        format!("unknown algorithm {s:?} (expected one of {})", names.join(", "))
    })
}

/// Environment family implied by a scenario name.
pub fn env_for_scenario(name: &str) -> Result<EnvSpec, ConfigError> {
    match name {
        "easy" | "hard" => Ok(EnvSpec::navigation(name)),
        "mild" | "chaotic" | "chaotic-vh" => Ok(EnvSpec::highway(name)),
        other => Err(ConfigError::Invalid(format!(
            "unknown scenario {other:?} (expected easy, hard, mild or chaotic)"
        ))),
    }
}

/// Reads a TOML config or the config embedded in a run manifest.
pub fn load_config(path: &Path) -> Result<TrainConfig, CliError> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        m.config.validate()?;
        return Ok(m.config);
    }
    Ok(TrainConfig::load(path)?)
}

/// Config from the file (or defaults), then command-line overrides.
pub fn resolve_config(flags: &RunFlags, fallback: Option<&Path>) -> Result<TrainConfig, CliError> {
    let mut cfg = match (&flags.config, fallback) {
        (Some(p), _) => load_config(p)?,
        (None, Some(p)) if p.exists() => load_config(p)?,
        _ => TrainConfig::default(),
    };
    if let Some(s) = &flags.scenario {
        let env = env_for_scenario(s)?;
        if env.kind != cfg.env.kind {
            cfg.t_h = None;
            cfg.t_p = None;
        }
        cfg.env = env;
    }
    if let Some(a) = flags.algo {
        cfg.algorithm = a;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    Checkpoint::read_from(BufReader::new(f)).map_err(|source| CliError::Checkpoint {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CliError> {
    let mut buf = Vec::new();
    ck.write_to(&mut buf).map_err(io_err(path))?;
    write_file(path, buf)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn speed_defined(cfg: &TrainConfig) -> bool {
    cfg.env.kind == EnvKind::Highway
}

/// One metric row over `episodes`, labelled with `algorithm`.
pub fn metric_row(cfg: &TrainConfig, algorithm: &str, episodes: &[EvalEpisode]) -> Result<MetricRow, CliError> {
    let outcomes: Vec<_> = episodes.iter().map(|e| e.outcome.clone()).collect();
    Ok(MetricRow::from_outcomes(
        algorithm,
        &cfg.env.scenario,
        &outcomes,
        speed_defined(cfg),
        0.95,
    )?)
}

fn curve_line(step: usize, r: &MetricRow) -> String {
    let (sm, sh) = match r.speed {
        Some(i) => (i.mean.to_string(), i.half_width.to_string()),
        None => (String::new(), String::new()),
    };
    format!(
        "{step},{},{},{},{sm},{sh},{},{},{},{}",
        r.episodes, r.reward.mean, r.reward.half_width, r.survival.mean, r.survival.half_width, r.success.mean, r.success.half_width
    )
}

/// What `train` produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: usize,
    pub episodes: usize,
    pub failures: Vec<String>,
    pub final_checkpoint: PathBuf,
    pub curve: Vec<(usize, MetricRow)>,
}

/// Runs training to `cfg.total_steps`, writing every artifact under `out`.
pub fn train_run(cfg: TrainConfig, out: &Path) -> Result<TrainOutcome, CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut trainer = Trainer::new(cfg)?;
    let cfg = trainer.config.clone();
    write_file(&out.join("config.toml"), cfg.to_toml()?)?;
    let outputs: BTreeMap<String, String> = [
        ("config", "config.toml"),
        ("stats", "stats.csv"),
        ("episodes", "episodes.csv"),
        ("curve", "eval.csv"),
        ("checkpoint", "checkpoint.ckpt"),
        ("last_episode_log", "episode.jsonl"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let manifest = RunManifest::new(&trainer, outputs);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Other(e.to_string()))?;
    write_file(&out.join("manifest.json"), json + "\n")?;

    let mut stats = format!("# train-stats v1\n{STATS_CSV_HEADER}\n");
    let mut episodes = format!("# train-episodes v1\n{EPISODES_CSV_HEADER}\n");
    let mut curve_csv = format!("# reward-curve v1\n{CURVE_CSV_HEADER}\n");
    let mut curve = Vec::new();
    let every = |k: usize, step: usize| k > 0 && step % k == 0;
    while trainer.steps() < cfg.total_steps {
        let s = trainer.steps();
        let next = [cfg.eval_every, cfg.checkpoint_every]
            .iter()
            .filter(|&&k| k > 0)
            .map(|&k| (s / k + 1) * k)
            .chain([cfg.total_steps])
            .min()
            .expect("non-empty");
        let rep = trainer.train_steps(next - s)?;
        for ph in &rep.phases {
            for a in &ph.agents {
                let p = a.ppo.as_ref();
                writeln!(
                    stats,
                    "{},{},{},{},{},{},{},{},{}",
                    ph.step,
                    a.agent,
                    a.transitions,
                    opt(p.map(|p| p.policy_loss)),
                    opt(p.map(|p| p.value_loss)),
                    opt(p.map(|p| p.entropy)),
                    opt(p.map(|p| p.clip_fraction)),
                    opt(a.behavior_loss),
                    opt(a.instant_loss)
                )
                .unwrap();
            }
        }
        for e in &rep.episodes {
            for (agent, r) in e.rewards.iter().enumerate() {
                writeln!(episodes, "{},{},{},{agent},{r}", e.episode, e.step, e.seed).unwrap();
            }
        }
        let step = trainer.steps();
        if every(cfg.checkpoint_every, step) && step < cfg.total_steps {
            write_checkpoint(&out.join("checkpoints").join(format!("step-{step:09}.ckpt")), &trainer.checkpoint())?;
        }
        if every(cfg.eval_every, step) || step == cfg.total_steps {
            let models = trainer.models();
            let eps = evaluate(&cfg, EvalPolicy::Greedy(&models), cfg.eval_episodes, cfg.seed, cfg.parallelism)?;
            if cfg.eval_episodes >= 2 {
                let row = metric_row(&cfg, cfg.algorithm.name(), &eps)?;
                writeln!(curve_csv, "{}", curve_line(step, &row)).unwrap();
                curve.push((step, row));
            }
        }
    }
    let final_checkpoint = out.join("checkpoint.ckpt");
    write_checkpoint(&final_checkpoint, &trainer.checkpoint())?;
    write_file(&out.join("stats.csv"), stats)?;
    write_file(&out.join("episodes.csv"), episodes)?;
    write_file(&out.join("eval.csv"), curve_csv)?;
    if let Some(log) = trainer.last_log() {
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).map_err(|source| CliError::Log {
            path: "episode.jsonl".into(),
            source,
        })?;
        write_file(&out.join("episode.jsonl"), buf)?;
    }
    Ok(TrainOutcome {
        steps: trainer.steps(),
        episodes: trainer.episodes(),
        failures: trainer.failures().to_vec(),
        final_checkpoint,
        curve,
    })
}

fn cmd_train(a: &TrainArgs) -> Result<String, CliError> {
    let mut cfg = resolve_config(&a.run, None)?;
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    if let Some(e) = a.episodes {
        cfg.eval_episodes = e;
    }
    cfg.validate()?;
    let o = train_run(cfg, &a.out)?;
    if let Some(first) = o.failures.first() {
        return Err(CliError::Aborted {
            count: o.failures.len(),
            first: first.clone(),
        });
    }
    Ok(format!(
        "trained {} steps ({} episodes); checkpoint {}\n",
        o.steps,
        o.episodes,
        o.final_checkpoint.display()
    ))
}

/// Config file next to a checkpoint: its own directory, then the parent.
pub fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    let dir = checkpoint.parent()?;
    [dir.join("config.toml"), dir.parent()?.join("config.toml")]
        .into_iter()
        .find(|p| p.exists())
}

/// Evaluation episodes and the metric table they produce.
pub fn eval_run(
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    episodes: usize,
) -> Result<(MetricTable, Vec<EvalEpisode>), CliError> {
    let (label, eps) = match checkpoint {
        Some(path) => {
            let ck = read_checkpoint(path)?;
            let models = models_from_checkpoint(cfg, &ck).map_err(|e| match e {
                TrainError::CheckpointMismatch(reason) => CliError::CheckpointMismatch {
                    path: path.display().to_string(),
                    reason,
                },
                other => other.into(),
            })?;
            let eps = evaluate(cfg, EvalPolicy::Greedy(&models), episodes, cfg.seed, cfg.parallelism)?;
            (cfg.algorithm.name(), eps)
        }
        None => ("random", evaluate(cfg, EvalPolicy::Random, episodes, cfg.seed, cfg.parallelism)?),
    };
    let row = metric_row(cfg, label, &eps)?;
    Ok((MetricTable { rows: vec![row] }, eps))
}

fn cmd_eval(a: &EvalArgs) -> Result<String, CliError> {
    let fallback = a.checkpoint.as_deref().and_then(sibling_config);
    let cfg = resolve_config(&a.run, fallback.as_deref())?;
    if a.episodes < 2 {
        return Err(CliError::Usage("--episodes must be at least 2".into()));
    }
    let (table, eps) = eval_run(&cfg, a.checkpoint.as_deref(), a.episodes)?;
    let csv = table.to_csv();
    match &a.out {
        Some(dir) => {
            write_file(&dir.join("metrics.csv"), &csv)?;
            for (i, e) in eps.iter().enumerate() {
                let mut buf = Vec::new();
                e.log.write_jsonl(&mut buf).map_err(|source| CliError::Log {
                    path: format!("episode-{i:04}.jsonl"),
                    source,
                })?;
                write_file(&dir.join("logs").join(format!("episode-{i:04}.jsonl")), buf)?;
            }
            Ok(format!("wrote {}\n", dir.join("metrics.csv").display()))
        }
        None => Ok(csv),
    }
}

pub fn read_log(path: &Path) -> Result<EpisodeLog, CliError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    EpisodeLog::read_jsonl(BufReader::new(f)).map_err(|source| CliError::Log {
        path: path.display().to_string(),
        source,
    })
}

fn cmd_replay(a: &ReplayArgs) -> Result<String, CliError> {
    let mut s = String::new();
    for p in &a.logs {
        let log = read_log(p)?;
        let ticks = log.verify_replay().map_err(|source| CliError::Replay {
            path: p.display().to_string(),
            source,
        })?;
        writeln!(s, "{}: {ticks} ticks verified", p.display()).unwrap();
    }
    Ok(s)
}

fn cmd_selftest(a: &SelftestArgs) -> Result<String, CliError> {
    let results = suites::run_all(a.seed, a.cases);
    let mut s = String::new();
    for r in &results {
        writeln!(s, "{r}").unwrap();
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::Other(format!("{s}{failed} suite(s) failed")));
    }
    Ok(s)
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command) -> Result<String, CliError> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Report(a) => report::cmd_report(a),
        Command::Selftest(a) => cmd_selftest(a),
    }
}
