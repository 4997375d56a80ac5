//! Non-cooperative navigation: heterogeneous point agents covering landmarks
//! in a 2x2 world, each drawn to whichever landmark is currently closest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_observation, AgentStep, EntityState, EnvError, Environment, Observation, Scope, SlotOrder,
    StepInfo, StepResult,
};

pub const IDLE: usize = 0;
pub const UP: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;
pub const RIGHT: usize = 4;
pub const NUM_ACTIONS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentKind {
    Normal,
    Tiny,
    Bulky,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavAgentProfile {
    pub kind: AgentKind,
    pub size: f64,
    pub acceleration: f64,
}

impl NavAgentProfile {
    pub fn of(kind: AgentKind) -> Self {
        let (size, acceleration) = match kind {
            AgentKind::Normal => (0.08, 1.0),
            AgentKind::Tiny => (0.06, 1.1),
            AgentKind::Bulky => (0.10, 0.9),
            AgentKind::Random => (0.08, 1.0),
        };
        Self {
            kind,
            size,
            acceleration,
        }
    }

    pub fn controllable(&self) -> bool {
        self.kind != AgentKind::Random
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavConfig {
    pub agents: Vec<AgentKind>,
    pub landmarks: usize,
    pub horizon: usize,
    pub dt: f64,
    pub damping: f64,
    /// Agents and landmarks spawn uniformly in `[-half_extent, half_extent]^2`.
    pub half_extent: f64,
    pub landmark_radius: f64,
    pub collision_penalty: f64,
    pub landmark_bonus: f64,
    pub team_bonus: f64,
    pub spawn_retries: usize,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self::easy()
    }
}

impl NavConfig {
    pub fn easy() -> Self {
        Self {
            agents: vec![AgentKind::Normal, AgentKind::Tiny, AgentKind::Bulky],
            landmarks: 3,
            horizon: 50,
            dt: 0.1,
            damping: 0.25,
            half_extent: 1.0,
            landmark_radius: 0.1,
            collision_penalty: -5.0,
            landmark_bonus: 10.0,
            team_bonus: 100.0,
            spawn_retries: 1000,
        }
    }

    pub fn hard() -> Self {
        let mut c = Self::easy();
        c.agents.push(AgentKind::Random);
        c
    }

    pub fn scenario(name: &str) -> Result<Self, EnvError> {
        match name {
            "easy" => Ok(Self::easy()),
            "hard" => Ok(Self::hard()),
            other => Err(EnvError::UnknownScenario(other.to_string())),
        }
    }

    pub fn num_controlled(&self) -> usize {
        self.agents.iter().filter(|k| **k != AgentKind::Random).count()
    }
}

/// `v' = v (1 - damping) + accel * dir * dt`, then `p' = p + v' dt`.
pub fn nav_dynamics(state: &EntityState, action: usize, acceleration: f64, dt: f64, damping: f64) -> EntityState {
    let dir = match action {
        UP => [0.0, 1.0],
        DOWN => [0.0, -1.0],
        LEFT => [-1.0, 0.0],
        RIGHT => [1.0, 0.0],
        _ => [0.0, 0.0],
    };
    let mut s = *state;
    for k in 0..2 {
        s.velocity[k] = s.velocity[k] * (1.0 - damping) + acceleration * dir[k] * dt;
        s.position[k] += s.velocity[k] * dt;
    }
    s
}

/// Agents collide when their centres are strictly closer than the sum of sizes.
pub fn nav_collision(a: &EntityState, size_a: f64, b: &EntityState, size_b: f64) -> bool {
    a.distance_to(b) < size_a + size_b
}

pub fn random_agent_policy<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.random_range(0..NUM_ACTIONS)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavWorld {
    pub profiles: Vec<NavAgentProfile>,
    pub agents: Vec<EntityState>,
    pub landmarks: Vec<[f64; 2]>,
}

/// Reward terms for one agent, kept separate so each can be checked.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavRewardTerms {
    pub distance: f64,
    pub collisions: f64,
    pub landmark: f64,
    pub team: f64,
}

impl NavRewardTerms {
    pub fn total(&self) -> f64 {
        self.distance + self.collisions + self.landmark + self.team
    }
}

impl NavWorld {
    pub fn closest_landmark_distance(&self, agent: usize) -> f64 {
        let p = self.agents[agent].position;
        self.landmarks
            .iter()
            .map(|l| ((p[0] - l[0]).powi(2) + (p[1] - l[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn collision_count(&self, agent: usize) -> usize {
        let (a, sa) = (&self.agents[agent], self.profiles[agent].size);
        (0..self.agents.len())
            .filter(|&j| j != agent && nav_collision(a, sa, &self.agents[j], self.profiles[j].size))
            .count()
    }

    pub fn reward_terms(&self, agent: usize, cfg: &NavConfig) -> NavRewardTerms {
        let dist = self.closest_landmark_distance(agent);
        let on_landmark = |i: usize| self.closest_landmark_distance(i) < cfg.landmark_radius;
        let all = (0..self.agents.len())
            .filter(|&i| self.profiles[i].controllable())
            .all(|i| on_landmark(i) && self.collision_count(i) == 0);
        NavRewardTerms {
            distance: -dist,
            collisions: cfg.collision_penalty * self.collision_count(agent) as f64,
            landmark: if on_landmark(agent) { cfg.landmark_bonus } else { 0.0 },
            team: if all { cfg.team_bonus } else { 0.0 },
        }
    }

    pub fn nav_reward(&self, agent: usize, cfg: &NavConfig) -> f64 {
        self.reward_terms(agent, cfg).total()
    }
}

/// The environment. Controlled agents are indexed `0..num_controlled`; the
/// random agent, when present, follows them. Landmark ids follow all agents.
#[derive(Clone, Debug)]
pub struct Navigation {
    cfg: NavConfig,
    world: Option<NavWorld>,
    /// Indices into `world.agents` of the controllable agents.
    controlled: Vec<usize>,
    tick: usize,
    rng: ChaCha8Rng,
}

impl Navigation {
    pub fn new(cfg: NavConfig) -> Self {
        let mut order: Vec<usize> = (0..cfg.agents.len()).filter(|&i| cfg.agents[i] != AgentKind::Random).collect();
        order.extend((0..cfg.agents.len()).filter(|&i| cfg.agents[i] == AgentKind::Random));
        let controlled = (0..cfg.num_controlled()).collect();
        let cfg = NavConfig {
            agents: order.iter().map(|&i| cfg.agents[i]).collect(),
            ..cfg
        };
        Self {
            cfg,
            world: None,
            controlled,
            tick: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn config(&self) -> &NavConfig {
        &self.cfg
    }

    pub fn world(&self) -> Option<&NavWorld> {
        self.world.as_ref()
    }

    /// Replaces the world state, e.g. to set up a scripted situation.
    pub fn set_world(&mut self, world: NavWorld) {
        self.world = Some(world);
    }

    fn landmark_entities(&self, w: &NavWorld) -> impl Iterator<Item = EntityState> + '_ {
        let base = w.agents.len() as u32;
        w.landmarks
            .clone()
            .into_iter()
            .enumerate()
            .map(move |(k, l)| EntityState::new(base + k as u32, l, [0.0, 0.0]))
    }

    fn observe_world(&self, w: &NavWorld, agent: usize) -> Observation {
        let ego = w.agents[agent];
        let others = w.agents.iter().copied().chain(self.landmark_entities(w));
        build_observation(ego, others, Scope::Full, SlotOrder::Id, self.capacity())
    }
}

impl Environment for Navigation {
    fn num_agents(&self) -> usize {
        self.controlled.len()
    }

    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn capacity(&self) -> usize {
        self.cfg.agents.len() - 1 + self.cfg.landmarks
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn tick(&self) -> usize {
        self.tick
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<Observation>, EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.tick = 0;
        let profiles: Vec<NavAgentProfile> = self.cfg.agents.iter().map(|k| NavAgentProfile::of(*k)).collect();
        let e = self.cfg.half_extent;
        let mut agents: Vec<EntityState> = Vec::with_capacity(profiles.len());
        for (i, p) in profiles.iter().enumerate() {
            let mut placed = false;
            for _ in 0..self.cfg.spawn_retries {
                let cand = EntityState::new(
                    i as u32,
                    [self.rng.random_range(-e..e), self.rng.random_range(-e..e)],
                    [0.0, 0.0],
                );
                let clear = agents
                    .iter()
                    .zip(&profiles)
                    .all(|(o, po)| !nav_collision(&cand, p.size, o, po.size));
                if clear {
                    agents.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(EnvError::InfeasibleSpawn(profiles.len()));
            }
        }
        let landmarks = (0..self.cfg.landmarks)
            .map(|_| [self.rng.random_range(-e..e), self.rng.random_range(-e..e)])
            .collect();
        self.world = Some(NavWorld {
            profiles,
            agents,
            landmarks,
        });
        (0..self.num_agents()).map(|i| self.observe(i)).collect()
    }

    fn step(&mut self, actions: &[Option<usize>]) -> Result<StepResult, EnvError> {
        if actions.len() != self.num_agents() {
            return Err(EnvError::ActionCount {
                expected: self.num_agents(),
                got: actions.len(),
            });
        }
        if self.tick >= self.cfg.horizon {
            return Err(EnvError::EpisodeOver(self.tick));
        }
        let mut joint = Vec::with_capacity(self.cfg.agents.len());
        for a in actions {
            let a = a.unwrap_or(IDLE);
            if a >= NUM_ACTIONS {
                return Err(EnvError::InvalidAction {
                    action: a,
                    size: NUM_ACTIONS,
                });
            }
            joint.push(a);
        }
        for _ in self.controlled.len()..self.cfg.agents.len() {
            joint.push(random_agent_policy(&mut self.rng));
        }
        let (dt, damping) = (self.cfg.dt, self.cfg.damping);
        let w = self.world.as_mut().ok_or(EnvError::NotReset)?;
        for (i, a) in joint.iter().enumerate() {
            w.agents[i] = nav_dynamics(&w.agents[i], *a, w.profiles[i].acceleration, dt, damping);
        }
        self.tick += 1;
        let finished = self.tick >= self.cfg.horizon;
        let w = self.world.as_ref().expect("world present");
        let agents = (0..self.num_agents())
            .map(|i| {
                let v = w.agents[i].velocity;
                AgentStep {
                    observation: self.observe_world(w, i),
                    reward: w.nav_reward(i, &self.cfg),
                    done: finished,
                    info: StepInfo {
                        collision: w.collision_count(i) > 0,
                        speed: (v[0] * v[0] + v[1] * v[1]).sqrt(),
                        degraded_action: false,
                        ignored_action: false,
                    },
                }
            })
            .collect();
        Ok(StepResult { agents, finished })
    }

    fn observe(&self, agent: usize) -> Result<Observation, EnvError> {
        if agent >= self.num_agents() {
            return Err(EnvError::UnknownAgent(agent));
        }
        let w = self.world.as_ref().ok_or(EnvError::NotReset)?;
        Ok(self.observe_world(w, agent))
    }

    fn agent_done(&self, _agent: usize) -> bool {
        self.tick >= self.cfg.horizon
    }

    fn entities(&self) -> Vec<EntityState> {
        match &self.world {
            Some(w) => w.agents.iter().copied().chain(self.landmark_entities(w)).collect(),
            None => Vec::new(),
        }
    }

    fn crashed(&self) -> Vec<bool> {
        match &self.world {
            Some(w) => (0..w.agents.len())
                .map(|i| w.collision_count(i) > 0)
                .chain(w.landmarks.iter().map(|_| false))
                .collect(),
            None => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idle_at_rest_stays_put() {
        let s = EntityState::new(0, [0.3, -0.2], [0.0, 0.0]);
        assert_eq!(nav_dynamics(&s, IDLE, 1.0, 0.1, 0.25), s);
    }

    #[test]
    fn collision_boundary_is_strict() {
        let a = EntityState::new(0, [0.0, 0.0], [0.0, 0.0]);
        let b = EntityState::new(1, [0.15, 0.0], [0.0, 0.0]);
        assert!(nav_collision(&a, 0.08, &b, 0.08));
        let c = EntityState::new(2, [0.16, 0.0], [0.0, 0.0]);
        assert!(!nav_collision(&a, 0.08, &c, 0.08));
        let d = EntityState::new(3, [0.17, 0.0], [0.0, 0.0]);
        assert!(!nav_collision(&a, 0.10, &d, 0.06));
    }

    #[test]
    fn easy_has_three_agents_and_landmarks() {
        let mut env = Navigation::new(NavConfig::easy());
        let obs = env.reset(7).unwrap();
        assert_eq!(obs.len(), 3);
        assert_eq!(env.world().unwrap().landmarks.len(), 3);
        assert_eq!(env.capacity(), 5);
        assert!(obs.iter().all(|o| o.neighbor_count() == 5));
    }
}
