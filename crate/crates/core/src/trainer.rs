//! The decentralized training loop: rollout with per-agent inference, then
//! a per-agent gradient phase (policy, behavioral module, instant module).

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{prepare, AgentMemory, AgentModel, Prepared};
use crate::config::{stream_rng, Algorithm, ConfigError, Env, TrainConfig, STREAMS};
use crate::env::{EnvError, Environment, Observation};
use crate::features::FeatureScale;
use crate::log::{fingerprint, EpisodeLog, LatentTrace, LogHeader, TickRecord, LOG_FORMAT, LOG_VERSION};
use crate::metrics::{AgentOutcome, EpisodeOutcome};
use crate::numerics::{Checkpoint, NumericsError};
use crate::parallel::Parallelism;
use crate::ppo::{ActionMode, PpoError, PpoStats, Rollout, Transition};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("environment at step {step}: {source}")]
    Env { step: usize, source: EnvError },
    #[error("agent {agent}: {source}")]
    Inference { agent: usize, source: NumericsError },
    #[error("agent {agent}: {source}")]
    Policy { agent: usize, source: PpoError },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint does not match the configuration: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One agent's retained experience for the incentive modules.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StoredEpisode {
    /// Observations at ticks `0..=ticks` (the last one follows the final action).
    pub observations: Vec<Observation>,
    /// Behavioral latents per slot used at each acted tick.
    pub beta: Vec<Vec<f64>>,
    pub ticks: usize,
}

/// Who read what, for the decentralization audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Resource {
    Observation,
    Reward,
    Action,
    Parameters,
    Experience,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Audit {
    /// `(reader, resource, owner) -> count`.
    pub reads: BTreeMap<(usize, Resource, usize), u64>,
    /// Parameter-store tags each agent updated.
    pub updated_stores: BTreeMap<usize, Vec<u64>>,
}

impl Audit {
    pub fn record(&mut self, reader: usize, resource: Resource, owner: usize) {
        *self.reads.entry((reader, resource, owner)).or_default() += 1;
    }

    /// Reads of another agent's rewards, actions, parameters or experience,
    /// plus any parameter store updated by more than one agent.
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .reads
            .keys()
            .filter(|(r, res, o)| r != o && *res != Resource::Observation)
            .map(|(r, res, o)| format!("agent {r} read {res:?} of agent {o}"))
            .collect();
        let mut owner: BTreeMap<u64, usize> = BTreeMap::new();
        for (a, tags) in &self.updated_stores {
            for t in tags {
                if let Some(prev) = owner.insert(*t, *a) {
                    if prev != *a {
                        v.push(format!("store {t:x} updated by agents {prev} and {a}"));
                    }
                }
            }
        }
        v
    }
}

/// Everything one agent owns during training.
#[derive(Clone, Debug)]
pub struct AgentSlot {
    pub index: usize,
    pub model: AgentModel,
    pub memory: AgentMemory,
    pub rollout: Rollout,
    pub store: VecDeque<StoredEpisode>,
    current: StoredEpisode,
    pending: Option<Prepared>,
    policy_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentPhaseStats {
    pub agent: usize,
    pub ppo: Option<PpoStats>,
    pub transitions: usize,
    pub behavior_loss: Option<f64>,
    pub instant_loss: Option<f64>,
    /// Modules whose update failed this round, with the reason.
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub step: usize,
    pub agents: Vec<AgentPhaseStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub step: usize,
    pub seed: u64,
    pub rewards: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub episodes: Vec<EpisodeSummary>,
    pub phases: Vec<PhaseStats>,
}

/// Per-agent sample of `k` stored episodes (with replacement).
fn sample_indices<R: Rng + ?Sized>(len: usize, k: usize, rng: &mut R) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..len)).collect()
}

/// Gradient phase of a single agent: policy update on its own rollout, then
/// the behavioral module over each sampled episode, then the instant module
/// over the same episodes. Touches nothing outside `slot`.
pub fn agent_gradient_phase(slot: &mut AgentSlot, bootstrap: f64, cfg: &TrainConfig, scale: &FeatureScale) -> AgentPhaseStats {
    let mut st = AgentPhaseStats {
        agent: slot.index,
        transitions: slot.rollout.len(),
        ..Default::default()
    };
    if !slot.rollout.is_empty() {
        match slot.model.ppo.update(&slot.rollout, bootstrap, &mut slot.policy_rng) {
            Ok(s) => st.ppo = Some(s),
            Err(e) => st.failures.push(format!("ppo: {e}")),
        }
    }
    slot.rollout.clear();
    if slot.store.is_empty() || cfg.k_samples == 0 {
        return st;
    }
    let picks = sample_indices(slot.store.len(), cfg.k_samples, &mut slot.replay_rng);
    if let Some(b) = &mut slot.model.behavior {
        let mut losses = Vec::new();
        for &p in &picks {
            let ep = &slot.store[p];
            let res = b
                .replay(&ep.observations, ep.ticks, scale)
                .and_then(|r| b.train_step(&r.batch, &mut slot.dropout_rng));
            match res {
                Ok(Some(l)) => losses.push(l),
                Ok(None) => {}
                Err(e) => {
                    st.failures.push(format!("behavior: {e}"));
                    break;
                }
            }
        }
        st.behavior_loss = mean(&losses);
    }
    if let Some(m) = &mut slot.model.instant {
        let mut losses = Vec::new();
        for &p in &picks {
            let ep = &slot.store[p];
            let res = m
                .replay(&ep.observations, &ep.beta, ep.ticks, scale)
                .and_then(|r| m.train_step(&r.batch, &mut slot.dropout_rng));
            match res {
                Ok(Some(l)) => losses.push(l),
                Ok(None) => {}
                Err(e) => {
                    st.failures.push(format!("instant: {e}"));
                    break;
                }
            }
        }
        st.instant_loss = mean(&losses);
    }
    st
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Inference for one agent at tick `t`, using only that agent's memory and
/// observation.
pub fn agent_prepare(slot: &mut AgentSlot, obs: &Observation, t: usize, scale: &FeatureScale) -> Result<(), NumericsError> {
    let p = prepare(&slot.model, &mut slot.memory, obs, t, scale)?;
    slot.pending = Some(p);
    Ok(())
}

pub struct Trainer {
    pub config: TrainConfig,
    pub env: Env,
    pub scale: FeatureScale,
    pub agents: Vec<AgentSlot>,
    pub audit: Audit,
    env_rng: ChaCha8Rng,
    steps: usize,
    since_update: usize,
    episodes: usize,
    in_episode: bool,
    episode_seed: u64,
    obs: Vec<Observation>,
    returns: Vec<f64>,
    log: Option<EpisodeLog>,
    last_log: Option<EpisodeLog>,
    config_hash: String,
    failures: Vec<String>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        let config = config.resolved();
        config.validate()?;
        let env = config.env.build()?;
        let scale = env.feature_scale();
        let seed = config.seed;
        let agents = (0..env.num_agents())
            .map(|i| {
                let mut init = stream_rng(seed, "init", i as u64);
                let model = AgentModel::new(&config, env.capacity(), env.num_actions(), &mut init);
                AgentSlot {
                    index: i,
                    memory: AgentMemory::new(config.behavior.t_h, model.layout.zeta_dim),
                    model,
                    rollout: Rollout::default(),
                    store: VecDeque::new(),
                    current: StoredEpisode::default(),
                    pending: None,
                    policy_rng: stream_rng(seed, "policy", i as u64),
                    dropout_rng: stream_rng(seed, "dropout", i as u64),
                    replay_rng: stream_rng(seed, "replay", i as u64),
                }
            })
            .collect();
        let config_hash = fingerprint(&config.to_toml()?);
        Ok(Self {
            env_rng: stream_rng(seed, "env", 0),
            scale,
            env,
            agents,
            audit: Audit::default(),
            steps: 0,
            since_update: 0,
            episodes: 0,
            in_episode: false,
            episode_seed: 0,
            obs: Vec::new(),
            returns: Vec::new(),
            log: None,
            last_log: None,
            config_hash,
            failures: Vec::new(),
            config,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Module updates that failed so far (the run continued without them).
    pub fn failures(&self) -> &[String] {
        &self.failures
    }

    /// Most recently completed training episode.
    pub fn last_log(&self) -> Option<&EpisodeLog> {
        self.last_log.as_ref()
    }

    pub fn models(&self) -> Vec<AgentModel> {
        self.agents.iter().map(|a| a.model.clone()).collect()
    }

    fn header(cfg: &TrainConfig, hash: &str, seed: u64, env: &Env) -> LogHeader {
        LogHeader {
            format: LOG_FORMAT.to_string(),
            version: LOG_VERSION,
            config_hash: hash.to_string(),
            seed,
            env: cfg.env.clone(),
            algorithm: cfg.algorithm,
            agents: env.num_agents(),
            horizon: env.horizon(),
        }
    }

    fn start_episode(&mut self) -> Result<(), TrainError> {
        self.episode_seed = self.env_rng.random();
        self.obs = self
            .env
            .reset(self.episode_seed)
            .map_err(|source| TrainError::Env { step: self.steps, source })?;
        for (slot, o) in self.agents.iter_mut().zip(&self.obs) {
            slot.memory.reset();
            slot.current = StoredEpisode {
                observations: vec![o.clone()],
                ..Default::default()
            };
        }
        self.returns = vec![0.0; self.agents.len()];
        let mut log = EpisodeLog::new(Self::header(&self.config, &self.config_hash, self.episode_seed, &self.env));
        log.ticks.push(TickRecord {
            tick: 0,
            entities: self.env.entities(),
            crashed: self.env.crashed(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            infos: Vec::new(),
            latents: Vec::new(),
        });
        self.log = Some(log);
        self.in_episode = true;
        Ok(())
    }

    /// Runs the gradient phase for every agent.
    pub fn gradient_phase(&mut self) -> PhaseStats {
        let boot: Vec<f64> = self
            .agents
            .iter()
            .map(|s| match (&s.pending, s.rollout.ends_episode()) {
                (Some(p), false) => s.model.ppo.value(&p.input).unwrap_or(0.0),
                _ => 0.0,
            })
            .collect();
        for s in &self.agents {
            self.audit.record(s.index, Resource::Experience, s.index);
            self.audit.record(s.index, Resource::Parameters, s.index);
            self.audit.updated_stores.entry(s.index).or_default().extend(s.model.store_tags());
        }
        let (cfg, scale) = (&self.config, &self.scale);
        let mut stats = vec![AgentPhaseStats::default(); self.agents.len()];
        let mut pairs: Vec<(&mut AgentSlot, &mut AgentPhaseStats)> = self.agents.iter_mut().zip(stats.iter_mut()).collect();
        cfg.parallelism.for_each_mut(&mut pairs, |i, (slot, out)| {
            **out = agent_gradient_phase(slot, boot[i], cfg, scale);
        });
        for s in &stats {
            for f in &s.failures {
                self.failures.push(format!("step {} agent {}: {f}", self.steps, s.agent));
            }
        }
        self.since_update = 0;
        PhaseStats {
            step: self.steps,
            agents: stats,
        }
    }

    /// Advances the simulation by `n` env steps, running gradient phases as
    /// the policy buffers fill.
    pub fn train_steps(&mut self, n: usize) -> Result<TrainReport, TrainError> {
        let mut report = TrainReport::default();
        for _ in 0..n {
            if !self.in_episode {
                self.start_episode()?;
            }
            let t = self.env.tick();
            let alive: Vec<bool> = (0..self.agents.len()).map(|i| !self.env.agent_done(i)).collect();
            let (obs, scale, par) = (&self.obs, &self.scale, self.config.parallelism);
            let mut results: Vec<Result<(), NumericsError>> = vec![Ok(()); self.agents.len()];
            let mut pairs: Vec<(&mut AgentSlot, &mut Result<(), NumericsError>)> =
                self.agents.iter_mut().zip(results.iter_mut()).collect();
            par.for_each_mut(&mut pairs, |i, (slot, out)| {
                if alive[i] {
                    **out = agent_prepare(slot, &obs[i], t, scale);
                } else {
                    slot.pending = None;
                }
            });
            for (agent, r) in results.into_iter().enumerate() {
                r.map_err(|source| TrainError::Inference { agent, source })?;
            }
            for (i, a) in alive.iter().enumerate() {
                if *a {
                    self.audit.record(i, Resource::Observation, usize::MAX);
                }
            }
            if self.since_update >= self.config.ppo.buffer {
                report.phases.push(self.gradient_phase());
            }
            let mut actions = vec![None; self.agents.len()];
            let mut chosen = Vec::with_capacity(self.agents.len());
            for (i, slot) in self.agents.iter_mut().enumerate() {
                let Some(p) = &slot.pending else {
                    chosen.push(None);
                    continue;
                };
                let c = slot
                    .model
                    .ppo
                    .select_action(&p.input, &mut slot.policy_rng, ActionMode::Sample)
                    .map_err(|source| TrainError::Policy { agent: i, source })?;
                actions[i] = Some(c.action);
                chosen.push(Some(c));
            }
            let res = self
                .env
                .step(&actions)
                .map_err(|source| TrainError::Env { step: self.steps, source })?;
            let mut traces = Vec::with_capacity(self.agents.len());
            for (i, slot) in self.agents.iter_mut().enumerate() {
                let Some(c) = chosen[i].take() else {
                    traces.push(None);
                    continue;
                };
                let p = slot.pending.take().expect("prepared input");
                let step = &res.agents[i];
                self.audit.record(i, Resource::Reward, i);
                self.audit.record(i, Resource::Action, i);
                slot.rollout.push(Transition {
                    input: p.input,
                    action: c.action,
                    log_prob: c.log_prob,
                    reward: step.reward,
                    value: c.value,
                    done: step.done,
                });
                slot.memory.observe(t, &self.obs[i]);
                slot.current.beta.push(p.trace.beta.clone());
                slot.current.observations.push(step.observation.clone());
                slot.current.ticks += 1;
                self.returns[i] += step.reward;
                traces.push(Some(p.trace));
            }
            if let Some(log) = &mut self.log {
                log.ticks.push(TickRecord {
                    tick: self.env.tick(),
                    entities: self.env.entities(),
                    crashed: self.env.crashed(),
                    actions: actions.clone(),
                    rewards: res.agents.iter().map(|a| a.reward).collect(),
                    dones: res.agents.iter().map(|a| a.done).collect(),
                    infos: res.agents.iter().map(|a| a.info).collect(),
                    latents: traces,
                });
            }
            self.obs = res.agents.iter().map(|a| a.observation.clone()).collect();
            self.steps += 1;
            self.since_update += 1;
            if res.finished {
                self.finish_episode(&mut report);
            }
        }
        Ok(report)
    }

    fn finish_episode(&mut self, report: &mut TrainReport) {
        let cap = self.config.store_episodes;
        for slot in &mut self.agents {
            let ep = std::mem::take(&mut slot.current);
            slot.store.push_back(ep);
            while slot.store.len() > cap {
                slot.store.pop_front();
            }
        }
        report.episodes.push(EpisodeSummary {
            episode: self.episodes,
            step: self.steps,
            seed: self.episode_seed,
            rewards: self.returns.clone(),
        });
        self.episodes += 1;
        self.in_episode = false;
        self.last_log = self.log.take();
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let models: Vec<&AgentModel> = self.agents.iter().map(|a| &a.model).collect();
        checkpoint_of(&models)
    }
}

pub fn checkpoint_of(models: &[&AgentModel]) -> Checkpoint {
    let mut ck = Checkpoint::new();
    for (i, m) in models.iter().enumerate() {
        m.export(&format!("agent{i}"), &mut ck);
    }
    ck
}

/// Fresh agent models for `cfg` with parameters loaded from `ck`.
pub fn models_from_checkpoint(cfg: &TrainConfig, ck: &Checkpoint) -> Result<Vec<AgentModel>, TrainError> {
    let cfg = cfg.clone().resolved();
    let env = cfg.env.build()?;
    let mut models: Vec<AgentModel> = (0..env.num_agents())
        .map(|i| AgentModel::new(&cfg, env.capacity(), env.num_actions(), &mut stream_rng(cfg.seed, "init", i as u64)))
        .collect();
    let expected: usize = models.iter().map(AgentModel::num_tensors).sum();
    if expected != ck.len() {
        return Err(TrainError::CheckpointMismatch(format!(
            "checkpoint holds {} tensors, configuration needs {expected}",
            ck.len()
        )));
    }
    for (i, m) in models.iter_mut().enumerate() {
        m.import(&format!("agent{i}"), ck)
            .map_err(|e| TrainError::CheckpointMismatch(e.to_string()))?;
    }
    Ok(models)
}

/// How evaluation picks actions.
#[derive(Clone, Copy, Debug)]
pub enum EvalPolicy<'a> {
    Greedy(&'a [AgentModel]),
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalEpisode {
    pub outcome: EpisodeOutcome,
    pub log: EpisodeLog,
}

/// Seed of evaluation episode `index` under eval seed `seed`.
pub fn eval_episode_seed(seed: u64, index: usize) -> u64 {
    stream_rng(seed, "eval", index as u64).random()
}

/// One evaluation episode: frozen parameters, greedy actions, dropout off.
pub fn eval_episode(
    cfg: &TrainConfig,
    policy: EvalPolicy<'_>,
    seed: u64,
    index: usize,
) -> Result<EvalEpisode, TrainError> {
    let mut env = cfg.env.build()?;
    let scale = env.feature_scale();
    let env_seed = eval_episode_seed(seed, index);
    let mut rng = stream_rng(seed, "eval-actions", index as u64);
    let mut obs = env.reset(env_seed).map_err(|source| TrainError::Env { step: 0, source })?;
    let n = env.num_agents();
    let mut memories: Vec<AgentMemory> = (0..n)
        .map(|_| AgentMemory::new(cfg.behavior.t_h.max(1), cfg.instant.hidden))
        .collect();
    let hash = fingerprint(&cfg.to_toml()?);
    let mut log = EpisodeLog::new(Trainer::header(cfg, &hash, env_seed, &env));
    log.ticks.push(TickRecord {
        tick: 0,
        entities: env.entities(),
        crashed: env.crashed(),
        actions: Vec::new(),
        rewards: Vec::new(),
        dones: Vec::new(),
        infos: Vec::new(),
        latents: Vec::new(),
    });
    let mut record = crate::env::EpisodeRecord::new(env_seed, &obs);
    loop {
        let t = env.tick();
        let mut actions = vec![None; n];
        let mut traces: Vec<Option<LatentTrace>> = vec![None; n];
        for i in 0..n {
            if env.agent_done(i) {
                continue;
            }
            match policy {
                EvalPolicy::Random => actions[i] = Some(rng.random_range(0..env.num_actions())),
                EvalPolicy::Greedy(models) => {
                    let p = prepare(&models[i], &mut memories[i], &obs[i], t, &scale)
                        .map_err(|source| TrainError::Inference { agent: i, source })?;
                    let c = models[i]
                        .ppo
                        .select_action(&p.input, &mut rng, ActionMode::Greedy)
                        .map_err(|source| TrainError::Policy { agent: i, source })?;
                    memories[i].observe(t, &obs[i]);
                    actions[i] = Some(c.action);
                    traces[i] = Some(p.trace);
                }
            }
        }
        let res = env.step(&actions).map_err(|source| TrainError::Env { step: t, source })?;
        record.push(&actions, &res);
        log.ticks.push(TickRecord {
            tick: env.tick(),
            entities: env.entities(),
            crashed: env.crashed(),
            actions,
            rewards: res.agents.iter().map(|a| a.reward).collect(),
            dones: res.agents.iter().map(|a| a.done).collect(),
            infos: res.agents.iter().map(|a| a.info).collect(),
            latents: if matches!(policy, EvalPolicy::Random) { Vec::new() } else { traces },
        });
        obs = res.agents.iter().map(|a| a.observation.clone()).collect();
        if res.finished {
            break;
        }
    }
    let horizon = env.horizon();
    let outcome = record
        .agents
        .iter()
        .map(|tr| AgentOutcome::from_trajectory(tr, horizon))
        .collect();
    Ok(EvalEpisode { outcome, log })
}

/// `episodes` evaluation episodes, possibly in parallel; results are in
/// episode order and independent of the parallelism mode.
pub fn evaluate(
    cfg: &TrainConfig,
    policy: EvalPolicy<'_>,
    episodes: usize,
    seed: u64,
    par: Parallelism,
) -> Result<Vec<EvalEpisode>, TrainError> {
    par.map((0..episodes).collect(), |e| eval_episode(cfg, policy, seed, e))
        .into_iter()
        .collect()
}

/// One independent training run per seed, each to `base.total_steps`;
/// the trained runs come back in seed order.
pub fn train_seeds(base: &TrainConfig, seeds: &[u64], par: Parallelism) -> Result<Vec<Trainer>, TrainError> {
    par.map(seeds.to_vec(), |seed| {
        let mut t = Trainer::new(TrainConfig { seed, ..base.clone() })?;
        t.train_steps(base.total_steps)?;
        Ok(t)
    })
    .into_iter()
    .collect()
}

/// Resolved configuration plus every seed needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub master_seed: u64,
    /// `(stream, index, stream id)` for each named per-agent stream.
    pub streams: Vec<(String, u64, u64)>,
    pub modules: Vec<Vec<String>>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(trainer: &Trainer, outputs: BTreeMap<String, String>) -> Self {
        let n = trainer.agents.len() as u64;
        let streams = STREAMS
            .iter()
            .flat_map(|s| {
                let count = if matches!(*s, "env" | "eval") { 1 } else { n };
                (0..count).map(move |i| (s.to_string(), i, crate::config::stream_id(s, i)))
            })
            .collect();
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: trainer.config.clone(),
            config_hash: trainer.config_hash.clone(),
            master_seed: trainer.config.seed,
            streams,
            modules: trainer
                .agents
                .iter()
                .map(|a| a.model.modules().into_iter().map(String::from).collect())
                .collect(),
            outputs,
        }
    }
}

/// Whether the algorithm runs any inference module.
pub fn has_inference(a: Algorithm) -> bool {
    a.uses_behavior() || a.uses_instant()
}
