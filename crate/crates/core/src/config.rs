//! Run configuration, environment selection, and seed streams.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::highway::{Highway, HighwayConfig};
use crate::env::navigation::{NavConfig, Navigation};
use crate::env::{EntityState, EnvError, Environment, Observation, StepResult};
use crate::features::FeatureScale;
use crate::incentive::behavior::BehaviorConfig;
use crate::incentive::instant::InstantConfig;
use crate::parallel::Parallelism;
use crate::ppo::PpoConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serializing config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Iplan,
    IplanBm,
    IplanGat,
    Ippo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Self::Iplan, Self::IplanBm, Self::IplanGat, Self::Ippo];

    pub fn uses_behavior(self) -> bool {
        matches!(self, Self::Iplan | Self::IplanBm)
    }

    pub fn uses_instant(self) -> bool {
        matches!(self, Self::Iplan | Self::IplanGat)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Iplan => "iplan",
            Self::IplanBm => "iplan-bm",
            Self::IplanGat => "iplan-gat",
            Self::Ippo => "ippo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Navigation,
    Highway,
}

/// Environment family plus scenario, with optional population overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub scenario: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controlled: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior_vehicles: Option<usize>,
}

impl EnvSpec {
    pub fn navigation(scenario: &str) -> Self {
        Self {
            kind: EnvKind::Navigation,
            scenario: scenario.to_string(),
            controlled: None,
            behavior_vehicles: None,
        }
    }

    pub fn highway(scenario: &str) -> Self {
        Self {
            kind: EnvKind::Highway,
            scenario: scenario.to_string(),
            controlled: None,
            behavior_vehicles: None,
        }
    }

    pub fn build(&self) -> Result<Env, ConfigError> {
        match self.kind {
            EnvKind::Navigation => {
                if self.controlled.is_some() || self.behavior_vehicles.is_some() {
                    return Err(ConfigError::Invalid(
                        "population overrides only apply to the highway".into(),
                    ));
                }
                Ok(Env::Navigation(Navigation::new(NavConfig::scenario(&self.scenario)?)))
            }
            EnvKind::Highway => {
                let mut cfg = HighwayConfig::scenario(&self.scenario)?;
                if let Some(n) = self.controlled {
                    cfg.n_controlled = n;
                }
                if let Some(n) = self.behavior_vehicles {
                    cfg.n_behavior = n;
                }
                Ok(Env::Highway(Box::new(Highway::new(cfg))))
            }
        }
    }

    pub fn default_history(&self) -> usize {
        match self.kind {
            EnvKind::Navigation => 5,
            EnvKind::Highway => 10,
        }
    }

    pub fn default_prediction(&self) -> usize {
        match self.kind {
            EnvKind::Navigation => 2,
            EnvKind::Highway => 5,
        }
    }
}

/// Either environment behind one concrete type.
#[derive(Clone, Debug)]
pub enum Env {
    Navigation(Navigation),
    Highway(Box<Highway>),
}

impl Env {
    pub fn kind(&self) -> EnvKind {
        match self {
            Env::Navigation(_) => EnvKind::Navigation,
            Env::Highway(_) => EnvKind::Highway,
        }
    }

    pub fn feature_scale(&self) -> FeatureScale {
        match self {
            Env::Navigation(n) => {
                let c = n.config();
                FeatureScale::unit((c.agents.len() + c.landmarks) as f64)
            }
            Env::Highway(_) => FeatureScale {
                position: [100.0, 20.0],
                velocity: 30.0,
                id: None,
                ego_x: false,
            },
        }
    }

    fn inner(&self) -> &dyn Environment {
        match self {
            Env::Navigation(n) => n,
            Env::Highway(h) => h.as_ref(),
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Environment {
        match self {
            Env::Navigation(n) => n,
            Env::Highway(h) => h.as_mut(),
        }
    }
}

impl Environment for Env {
    fn num_agents(&self) -> usize {
        self.inner().num_agents()
    }
    fn num_actions(&self) -> usize {
        self.inner().num_actions()
    }
    fn capacity(&self) -> usize {
        self.inner().capacity()
    }
    fn horizon(&self) -> usize {
        self.inner().horizon()
    }
    fn tick(&self) -> usize {
        self.inner().tick()
    }
    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>, EnvError> {
        self.inner_mut().reset(seed)
    }
    fn step(&mut self, actions: &[Option<usize>]) -> Result<StepResult, EnvError> {
        self.inner_mut().step(actions)
    }
    fn observe(&self, agent: usize) -> Result<Observation, EnvError> {
        self.inner().observe(agent)
    }
    fn agent_done(&self, agent: usize) -> bool {
        self.inner().agent_done(agent)
    }
    fn entities(&self) -> Vec<EntityState> {
        self.inner().entities()
    }
    fn crashed(&self) -> Vec<bool> {
        self.inner().crashed()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub env: EnvSpec,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub total_steps: usize,
    /// History length; the environment's default when absent.
    pub t_h: Option<usize>,
    /// Prediction horizon of the instant module; the environment's default when absent.
    pub t_p: Option<usize>,
    /// Episodes sampled per gradient phase for the incentive modules.
    pub k_samples: usize,
    /// Recent episodes retained per agent for the incentive modules.
    pub store_episodes: usize,
    /// Env steps between evaluations; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Env steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub parallelism: Parallelism,
    pub ppo: PpoConfig,
    pub behavior: BehaviorConfig,
    pub instant: InstantConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvSpec::navigation("easy"),
            algorithm: Algorithm::Iplan,
            seed: 0,
            total_steps: 200_000,
            t_h: None,
            t_p: None,
            k_samples: 4,
            store_episodes: 16,
            eval_every: 50_000,
            eval_episodes: 32,
            checkpoint_every: 50_000,
            parallelism: Parallelism::default(),
            ppo: PpoConfig::default(),
            behavior: BehaviorConfig::default(),
            instant: InstantConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn new(env: EnvSpec, algorithm: Algorithm) -> Self {
        Self {
            env,
            algorithm,
            ..Self::default()
        }
        .resolved()
    }

    pub fn from_toml(s: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(s)?;
        let c = c.resolved();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    /// Fills environment-dependent defaults and copies the history and
    /// prediction lengths into the module configs.
    pub fn resolved(mut self) -> Self {
        let t_h = self.t_h.unwrap_or_else(|| self.env.default_history());
        let t_p = self.t_p.unwrap_or_else(|| self.env.default_prediction());
        self.t_h = Some(t_h);
        self.t_p = Some(t_p);
        self.behavior.t_h = t_h;
        self.instant.t_p = t_p;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.t_h == Some(0) || self.t_p == Some(0) {
            return bad("t_h and t_p must be at least 1");
        }
        if !(self.ppo.clip > 0.0 && self.ppo.clip < 1.0) {
            return bad("ppo.clip must lie in (0, 1)");
        }
        if self.ppo.buffer == 0 || self.ppo.minibatch == 0 || self.ppo.epochs == 0 {
            return bad("ppo buffer, minibatch and epochs must be positive");
        }
        if let crate::incentive::behavior::UpdateMode::Hard { interval: 0 } = self.behavior.update {
            return bad("behavior.update.interval must be positive");
        }
        if self.store_episodes == 0 {
            return bad("store_episodes must be positive");
        }
        if !(0.0..=1.0).contains(&self.behavior.eta) {
            return bad("behavior.eta must lie in [0, 1]");
        }
        self.env.build()?;
        Ok(())
    }
}

/// Named random streams derived from one master seed. Each (name, index)
/// pair selects an independent ChaCha stream.
pub fn stream_rng(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream_id(name, index));
    rng
}

/// FNV-1a over the stream name followed by the index bytes.
pub fn stream_id(name: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes().chain(index.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub const STREAMS: [&str; 6] = ["env", "init", "policy", "dropout", "eval", "replay"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig::new(EnvSpec::highway("chaotic"), Algorithm::IplanBm);
        let back = TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, back);
        assert_eq!(back.behavior.t_h, 10);
        assert_eq!(back.instant.t_p, 5);
    }

    #[test]
    fn navigation_defaults_resolve() {
        let c = TrainConfig::from_toml("[env]\nkind = \"navigation\"\nscenario = \"easy\"\n").unwrap();
        assert_eq!((c.behavior.t_h, c.instant.t_p), (5, 2));
    }

    #[test]
    fn streams_differ() {
        use rand::Rng;
        let a: u64 = stream_rng(1, "env", 0).random();
        let b: u64 = stream_rng(1, "policy", 0).random();
        let c: u64 = stream_rng(1, "env", 1).random();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
