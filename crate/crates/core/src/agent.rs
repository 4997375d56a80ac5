//! One decentralized agent: its learned parameters and its per-episode
//! inference memory.

use rand::Rng;

use crate::config::{Algorithm, TrainConfig};
use crate::env::{HistoryBuffer, Observation};
use crate::features::{observation_block, observation_block_len, slot_ids, FeatureScale};
use crate::incentive::behavior::{BehaviorModule, WindowRows};
use crate::incentive::instant::{InstantFrame, InstantModule};
use crate::incentive::Latents;
use crate::log::LatentTrace;
use crate::numerics::{Checkpoint, NumericsError};
use crate::ppo::{PpoController, ValueNorm};

/// Segment sizes of the policy input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputLayout {
    pub block: usize,
    pub slots: usize,
    pub latent_dim: usize,
    pub zeta_dim: usize,
}

impl InputLayout {
    pub fn new(capacity: usize, latent_dim: usize, zeta_dim: usize) -> Self {
        Self {
            block: observation_block_len(capacity),
            slots: capacity + 1,
            latent_dim,
            zeta_dim,
        }
    }

    pub fn for_config(cfg: &TrainConfig, capacity: usize) -> Self {
        Self::new(capacity, cfg.behavior.latent_dim, cfg.instant.hidden)
    }

    pub fn beta_len(&self) -> usize {
        self.slots * self.latent_dim
    }

    pub fn len(&self) -> usize {
        self.block + self.beta_len() + self.zeta_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Learned parameters of one agent. No field is ever shared between agents.
#[derive(Clone, Debug)]
pub struct AgentModel {
    pub algorithm: Algorithm,
    pub layout: InputLayout,
    pub ppo: PpoController,
    pub behavior: Option<BehaviorModule>,
    pub instant: Option<InstantModule>,
}

impl AgentModel {
    pub fn new<R: Rng + ?Sized>(cfg: &TrainConfig, capacity: usize, num_actions: usize, rng: &mut R) -> Self {
        let layout = InputLayout::for_config(cfg, capacity);
        let ppo = PpoController::new(cfg.ppo.clone(), layout.len(), num_actions, rng);
        let behavior = cfg
            .algorithm
            .uses_behavior()
            .then(|| BehaviorModule::new(cfg.behavior.clone(), rng));
        let instant = cfg
            .algorithm
            .uses_instant()
            .then(|| InstantModule::new(cfg.instant.clone(), capacity, cfg.behavior.latent_dim, rng));
        Self {
            algorithm: cfg.algorithm,
            layout,
            ppo,
            behavior,
            instant,
        }
    }

    /// Names of the inference modules this agent carries.
    pub fn modules(&self) -> Vec<&'static str> {
        let mut m = Vec::new();
        if self.behavior.is_some() {
            m.push("behavior");
        }
        if self.instant.is_some() {
            m.push("instant");
        }
        m
    }

    pub fn export(&self, prefix: &str, ck: &mut Checkpoint) {
        self.ppo.actor_store.export(&format!("{prefix}/ppo"), ck);
        self.ppo.critic_store.export(&format!("{prefix}/ppo"), ck);
        ck.insert(format!("{prefix}/ppo/value_norm"), self.ppo.value_norm.to_tensor());
        if let Some(b) = &self.behavior {
            b.store.export(prefix, ck);
        }
        if let Some(i) = &self.instant {
            i.store.export(prefix, ck);
        }
    }

    pub fn import(&mut self, prefix: &str, ck: &Checkpoint) -> Result<(), NumericsError> {
        self.ppo.actor_store.import(&format!("{prefix}/ppo"), ck)?;
        self.ppo.critic_store.import(&format!("{prefix}/ppo"), ck)?;
        let key = format!("{prefix}/ppo/value_norm");
        let vn = ck
            .get(&key)
            .ok_or_else(|| NumericsError::Checkpoint(format!("missing tensor {key}")))?;
        self.ppo.value_norm = ValueNorm::from_tensor(vn)?;
        if let Some(b) = &mut self.behavior {
            b.store.import(prefix, ck)?;
        }
        if let Some(i) = &mut self.instant {
            i.store.import(prefix, ck)?;
        }
        Ok(())
    }

    pub fn num_tensors(&self) -> usize {
        self.ppo.actor_store.len()
            + self.ppo.critic_store.len()
            + 1
            + self.behavior.as_ref().map_or(0, |b| b.store.len())
            + self.instant.as_ref().map_or(0, |i| i.store.len())
    }

    /// Identity tags of every parameter store this agent owns.
    pub fn store_tags(&self) -> Vec<u64> {
        let mut t = vec![self.ppo.actor_store.tag(), self.ppo.critic_store.tag()];
        t.extend(self.behavior.as_ref().map(|b| b.store.tag()));
        t.extend(self.instant.as_ref().map(|i| i.store.tag()));
        t
    }
}

/// What an agent carries between ticks of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentMemory {
    pub history: HistoryBuffer,
    pub latents: Latents,
    pub zeta: Vec<f64>,
}

impl AgentMemory {
    pub fn new(t_h: usize, zeta_dim: usize) -> Self {
        Self {
            history: HistoryBuffer::new(t_h),
            latents: Latents::default(),
            zeta: vec![0.0; zeta_dim],
        }
    }

    pub fn reset(&mut self) {
        self.history.clear();
        self.latents.clear();
        self.zeta.iter_mut().for_each(|z| *z = 0.0);
    }

    /// Records the observation of tick `t` once the action for it is chosen.
    pub fn observe(&mut self, t: usize, obs: &Observation) {
        self.history.push(t, obs);
    }
}

/// The policy input of one tick plus the latents that went into it.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub input: Vec<f64>,
    pub trace: LatentTrace,
}

/// Infers the behavioral latents (from observations before `t`), then the
/// instant latent, and assembles the policy input for tick `t`.
pub fn prepare(
    model: &AgentModel,
    memory: &mut AgentMemory,
    obs: &Observation,
    t: usize,
    scale: &FeatureScale,
) -> Result<Prepared, NumericsError> {
    let layout = model.layout;
    if let Some(b) = &model.behavior {
        let rows = WindowRows::build(&memory.history, obs, t, scale);
        b.update(&rows, &mut memory.latents, t)?;
    }
    let (ids, present) = slot_ids(obs);
    let beta = memory.latents.slots(&ids, &present, layout.latent_dim);
    let mut attention = None;
    if let Some(i) = &model.instant {
        let frame = InstantFrame::build(obs, &beta, layout.latent_dim, scale);
        let (z, a) = i.infer(&frame, &memory.zeta)?;
        memory.zeta = z;
        attention = Some(a.into_data());
    }
    let mut input = observation_block(obs, scale);
    input.extend_from_slice(&beta);
    input.extend_from_slice(&memory.zeta);
    debug_assert_eq!(input.len(), layout.len());
    Ok(Prepared {
        input,
        trace: LatentTrace {
            beta,
            zeta: memory.zeta.clone(),
            attention,
        },
    })
}
