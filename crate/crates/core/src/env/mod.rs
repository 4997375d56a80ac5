//! Shared environment abstractions: entity states, masked observations,
//! per-entity observation histories and the synchronous episode loop.

pub mod highway;
pub mod navigation;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("could not place {0} entities without overlap")]
    InfeasibleSpawn(usize),
    #[error("unknown agent {0}")]
    UnknownAgent(usize),
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("action {action} is outside the action set of size {size}")]
    InvalidAction { action: usize, size: usize },
    #[error("episode already finished at tick {0}")]
    EpisodeOver(usize),
    #[error("environment was stepped before reset")]
    NotReset,
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
}

/// One entity's id, position and velocity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityState {
    pub id: u32,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl EntityState {
    pub fn new(id: u32, position: [f64; 2], velocity: [f64; 2]) -> Self {
        Self {
            id,
            position,
            velocity,
        }
    }

    pub fn distance_to(&self, other: &EntityState) -> f64 {
        let dx = self.position[0] - other.position[0];
        let dy = self.position[1] - other.position[1];
        (dx * dx + dy * dy).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(&self.velocity).all(|v| v.is_finite())
    }
}

/// Ego state in absolute coordinates plus a fixed number of neighbor slots
/// whose positions are relative to the ego.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub ego: EntityState,
    pub neighbors: Vec<EntityState>,
    pub present: Vec<bool>,
}

impl Observation {
    pub fn capacity(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbor_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    /// Absolute state of the neighbor in `slot`, if present.
    pub fn absolute_neighbor(&self, slot: usize) -> Option<EntityState> {
        if !self.present[slot] {
            return None;
        }
        let n = self.neighbors[slot];
        Some(EntityState {
            position: [
                n.position[0] + self.ego.position[0],
                n.position[1] + self.ego.position[1],
            ],
            ..n
        })
    }

    /// Ego followed by every present neighbor, all in absolute coordinates.
    pub fn absolute_entities(&self) -> impl Iterator<Item = EntityState> + '_ {
        std::iter::once(self.ego).chain((0..self.capacity()).filter_map(|s| self.absolute_neighbor(s)))
    }
}

/// Which candidates an observer may see.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Scope {
    /// Everything is visible.
    Full,
    /// Visible when `|dx| <= longitudinal` and `|dy| <= lateral`.
    Box { longitudinal: f64, lateral: f64 },
}

impl Scope {
    pub fn contains(&self, ego: &EntityState, other: &EntityState) -> bool {
        match *self {
            Scope::Full => true,
            Scope::Box {
                longitudinal,
                lateral,
            } => {
                (other.position[0] - ego.position[0]).abs() <= longitudinal
                    && (other.position[1] - ego.position[1]).abs() <= lateral
            }
        }
    }
}

/// How visible candidates are assigned to neighbor slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotOrder {
    /// Nearest first, ties by id.
    Distance,
    /// Ascending id, so each entity keeps its slot.
    Id,
}

/// Builds an observation: candidates inside `scope` in `order`, truncated
/// to `capacity`, positions made relative.
pub fn build_observation(
    ego: EntityState,
    candidates: impl IntoIterator<Item = EntityState>,
    scope: Scope,
    order: SlotOrder,
    capacity: usize,
) -> Observation {
    let mut visible: Vec<(f64, EntityState)> = candidates
        .into_iter()
        .filter(|c| c.id != ego.id && scope.contains(&ego, c))
        .map(|c| (ego.distance_to(&c), c))
        .collect();
    match order {
        SlotOrder::Distance => visible.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id))),
        SlotOrder::Id => visible.sort_by_key(|c| c.1.id),
    }
    let mut neighbors = vec![EntityState::default(); capacity];
    let mut present = vec![false; capacity];
    for (slot, (_, c)) in visible.into_iter().take(capacity).enumerate() {
        neighbors[slot] = EntityState {
            id: c.id,
            position: [c.position[0] - ego.position[0], c.position[1] - ego.position[1]],
            velocity: c.velocity,
        };
        present[slot] = true;
    }
    Observation {
        ego,
        neighbors,
        present,
    }
}

/// Extra per-agent facts emitted with each step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub collision: bool,
    pub speed: f64,
    /// The requested action could not be carried out and was replaced by idle.
    pub degraded_action: bool,
    /// An action was supplied for an agent that had already finished.
    pub ignored_action: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentStep {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub agents: Vec<AgentStep>,
    /// The horizon was reached with this step.
    pub finished: bool,
}

/// Synchronous multi-agent environment.
pub trait Environment {
    fn num_agents(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn capacity(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Decision steps taken since the last reset.
    fn tick(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>, EnvError>;
    /// Advances one decision step. `actions[i]` is ignored (and flagged)
    /// when agent `i` is already done; `None` is only valid for done agents.
    fn step(&mut self, actions: &[Option<usize>]) -> Result<StepResult, EnvError>;
    fn observe(&self, agent: usize) -> Result<Observation, EnvError>;
    fn agent_done(&self, agent: usize) -> bool;
    /// Absolute state of every simulated entity, controlled agents first.
    fn entities(&self) -> Vec<EntityState>;
    /// Per-tick collision flag of every entity in [`Environment::entities`] order.
    fn crashed(&self) -> Vec<bool>;
}

/// Ring buffer of the last `t_h` observed states of each entity, keyed by id.
/// Entities that leave the scope keep their (frozen) buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryBuffer {
    t_h: usize,
    tracks: BTreeMap<u32, VecDeque<(usize, EntityState)>>,
}

/// Fixed-length window: `states[k]` is the state at tick `t - t_h + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryWindow {
    pub states: Vec<EntityState>,
    pub valid: Vec<bool>,
}

impl HistoryBuffer {
    pub fn new(t_h: usize) -> Self {
        assert!(t_h > 0, "history length must be positive");
        Self {
            t_h,
            tracks: BTreeMap::new(),
        }
    }

    pub fn t_h(&self) -> usize {
        self.t_h
    }

    pub fn clear(&mut self) {
        self.tracks.clear();
    }

    /// Records every entity of an observation (ego included) at `tick`,
    /// in absolute coordinates.
    pub fn push(&mut self, tick: usize, obs: &Observation) {
        for e in obs.absolute_entities() {
            let track = self.tracks.entry(e.id).or_default();
            if track.back().is_some_and(|(t, _)| *t >= tick) {
                continue;
            }
            track.push_back((tick, e));
            if track.len() > self.t_h {
                track.pop_front();
            }
        }
    }

    pub fn len(&self, id: u32) -> usize {
        self.tracks.get(&id).map_or(0, VecDeque::len)
    }

    pub fn tracked_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.tracks.keys().copied()
    }

    /// The `t_h` ticks before `t` (`t` itself excluded), oldest first.
    /// Ticks with no recorded state are zero-filled and invalid.
    pub fn window(&self, id: u32, t: usize) -> HistoryWindow {
        history_window(self.tracks.get(&id), t, self.t_h)
    }
}

fn history_window(
    track: Option<&VecDeque<(usize, EntityState)>>,
    t: usize,
    t_h: usize,
) -> HistoryWindow {
    let mut states = vec![EntityState::default(); t_h];
    let mut valid = vec![false; t_h];
    if let Some(track) = track {
        for (tick, s) in track {
            if *tick < t && *tick + t_h >= t {
                let k = *tick + t_h - t;
                states[k] = *s;
                valid[k] = true;
            }
        }
    }
    HistoryWindow { states, valid }
}

/// One agent's trajectory within an episode. `observations` has one more
/// entry than `actions` when the agent lived to the horizon: the final
/// observation after the last step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentTrajectory {
    pub observations: Vec<Observation>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub infos: Vec<StepInfo>,
}

impl AgentTrajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Rebuilds the history buffer as it stood just before tick `t` was
    /// pushed, i.e. holding observations `0..t`.
    pub fn history_before(&self, t: usize, t_h: usize) -> HistoryBuffer {
        let mut h = HistoryBuffer::new(t_h);
        for (tick, obs) in self.observations.iter().enumerate().take(t) {
            h.push(tick, obs);
        }
        h
    }
}

/// All agents' trajectories for one episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub agents: Vec<AgentTrajectory>,
}

impl EpisodeRecord {
    pub fn new(seed: u64, initial: &[Observation]) -> Self {
        Self {
            seed,
            agents: initial
                .iter()
                .map(|o| AgentTrajectory {
                    observations: vec![o.clone()],
                    ..Default::default()
                })
                .collect(),
        }
    }

    /// Appends one step. Agents absent from `actions` (`None`) were done.
    pub fn push(&mut self, actions: &[Option<usize>], result: &StepResult) {
        for (i, (a, step)) in actions.iter().zip(&result.agents).enumerate() {
            let Some(a) = a else { continue };
            let tr = &mut self.agents[i];
            tr.actions.push(*a);
            tr.rewards.push(step.reward);
            tr.dones.push(step.done);
            tr.infos.push(step.info);
            tr.observations.push(step.observation.clone());
        }
    }
}

/// Runs one episode to completion with a caller-supplied policy.
pub fn run_episode<E: Environment + ?Sized>(
    env: &mut E,
    seed: u64,
    mut policy: impl FnMut(usize, &Observation) -> usize,
) -> Result<EpisodeRecord, EnvError> {
    let obs = env.reset(seed)?;
    let mut record = EpisodeRecord::new(seed, &obs);
    let mut current = obs;
    loop {
        let actions: Vec<Option<usize>> = (0..env.num_agents())
            .map(|i| (!env.agent_done(i)).then(|| policy(i, &current[i])))
            .collect();
        let result = env.step(&actions)?;
        record.push(&actions, &result);
        current = result.agents.iter().map(|s| s.observation.clone()).collect();
        if result.finished {
            return Ok(record);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn es(id: u32, x: f64, y: f64) -> EntityState {
        EntityState::new(id, [x, y], [0.0, 0.0])
    }

    #[test]
    fn observation_sorted_and_relative() {
        let ego = es(0, 1.0, 1.0);
        let obs = build_observation(ego, [es(3, 4.0, 1.0), es(2, 2.0, 1.0), es(1, 0.0, 1.0)], Scope::Full, SlotOrder::Distance, 4);
        let ids: Vec<u32> = obs.neighbors.iter().map(|n| n.id).collect();
        // 1 and 2 are both at distance 1, tie broken by id
        assert_eq!(ids, vec![1, 2, 3, 0]);
        assert_eq!(obs.present, vec![true, true, true, false]);
        assert_eq!(obs.neighbors[2].position, [3.0, 0.0]);
        assert_eq!(obs.neighbors[3], EntityState::default());
    }

    #[test]
    fn id_order_keeps_slots() {
        let ego = es(1, 0.0, 0.0);
        let obs = build_observation(ego, [es(3, 0.5, 0.0), es(0, 9.0, 0.0), es(2, 4.0, 0.0)], Scope::Full, SlotOrder::Id, 3);
        let ids: Vec<u32> = obs.neighbors.iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![0, 2, 3]);
    }

    #[test]
    fn box_scope_filters() {
        let ego = es(0, 0.0, 0.0);
        let scope = Scope::Box {
            longitudinal: 100.0,
            lateral: 20.0,
        };
        let obs = build_observation(ego, [es(1, 150.0, 0.0), es(2, -100.0, 0.0)], scope, SlotOrder::Distance, 15);
        assert_eq!(obs.neighbor_count(), 1);
        assert_eq!(obs.neighbors[0].id, 2);
    }

    #[test]
    fn window_pads_front_before_t_h() {
        let mut h = HistoryBuffer::new(5);
        let obs = build_observation(es(0, 0.0, 0.0), [], Scope::Full, SlotOrder::Id, 1);
        for t in 0..2 {
            h.push(t, &obs);
        }
        let w = h.window(0, 2);
        assert_eq!(w.valid, vec![false, false, false, true, true]);
    }
}
