//! Heterogeneous highway: an eight-lane road shared by a few policy-driven
//! vehicles and a crowd of IDM/MOBIL drivers with three temperaments.

mod driver;
mod vehicle;

pub use driver::{
    idm_acceleration, mobil_decision, DriverKind, DriverProfile, MobilInputs, MobilParams,
    IDM_DELTA,
};
pub use vehicle::{
    bicycle_step, rectangles_overlap, speed_control, steering_control, ControllerGains,
    VehicleKind, VehicleState,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_observation, AgentStep, EntityState, EnvError, Environment, Observation, Scope,
    SlotOrder, StepInfo, StepResult,
};

pub const LANE_LEFT: usize = 0;
pub const IDLE: usize = 1;
pub const LANE_RIGHT: usize = 2;
pub const FASTER: usize = 3;
pub const SLOWER: usize = 4;
pub const NUM_ACTIONS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HighwayConfig {
    pub lanes: usize,
    pub lane_width: f64,
    pub n_controlled: usize,
    pub n_behavior: usize,
    /// Fractions of (Normal, Aggressive, Conservative) behavior vehicles.
    pub composition: [f64; 3],
    pub density: f64,
    pub horizon: usize,
    /// Simulation ticks per decision step.
    pub substeps: usize,
    pub dt: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub scope_longitudinal: f64,
    pub scope_lateral: f64,
    pub capacity: usize,
    pub ego_initial_speed: f64,
    pub ego_max_speed: f64,
    pub ego_max_accel: f64,
    pub speed_delta: f64,
    pub collision_reward: f64,
    pub right_lane_reward: f64,
    pub high_speed_reward: f64,
    pub reward_speed_range: (f64, f64),
    pub mobil: MobilParams,
    pub gains: ControllerGains,
    /// Mean longitudinal spacing between consecutively spawned vehicles at density 1.
    pub mean_headway: f64,
    pub min_headway: f64,
    /// Minimum spawn distance between two vehicles sharing a lane.
    pub min_lane_gap: f64,
    pub spawn_retries: usize,
}

impl Default for HighwayConfig {
    fn default() -> Self {
        Self::mild()
    }
}

impl HighwayConfig {
    pub fn mild() -> Self {
        Self {
            lanes: 8,
            lane_width: 4.0,
            n_controlled: 5,
            n_behavior: 50,
            composition: [0.8, 0.1, 0.1],
            density: 1.0,
            horizon: 90,
            substeps: 15,
            dt: 1.0 / 15.0,
            vehicle_length: 5.0,
            vehicle_width: 2.0,
            scope_longitudinal: 100.0,
            scope_lateral: 20.0,
            capacity: 15,
            ego_initial_speed: 25.0,
            ego_max_speed: 40.0,
            ego_max_accel: 6.0,
            speed_delta: 5.0,
            collision_reward: -1.0,
            right_lane_reward: 0.1,
            high_speed_reward: 0.4,
            reward_speed_range: (20.0, 30.0),
            mobil: MobilParams::default(),
            gains: ControllerGains::default(),
            mean_headway: 37.0 * (-1.0f64).exp(),
            min_headway: 2.0,
            min_lane_gap: 25.0,
            spawn_retries: 1000,
        }
    }

    pub fn chaotic() -> Self {
        Self {
            composition: [0.4, 0.3, 0.3],
            ..Self::mild()
        }
    }

    /// Chaotic mix at twice the density. Available, but not a tuned target.
    pub fn chaotic_vh() -> Self {
        Self {
            density: 2.0,
            ..Self::chaotic()
        }
    }

    pub fn scenario(name: &str) -> Result<Self, EnvError> {
        match name {
            "mild" => Ok(Self::mild()),
            "chaotic" => Ok(Self::chaotic()),
            "chaotic-vh" => Ok(Self::chaotic_vh()),
            other => Err(EnvError::UnknownScenario(other.to_string())),
        }
    }

    /// Realized number of vehicles of each kind: `round(fraction * n_behavior)`,
    /// with any rounding remainder given to Normal.
    pub fn composition_counts(&self) -> [usize; 3] {
        let n = self.n_behavior as f64;
        let agg = (self.composition[1] * n).round() as usize;
        let con = (self.composition[2] * n).round() as usize;
        [self.n_behavior.saturating_sub(agg + con), agg, con]
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        lane as f64 * self.lane_width
    }

    pub fn lane_of(&self, y: f64) -> usize {
        let l = (y / self.lane_width).round();
        l.clamp(0.0, (self.lanes - 1) as f64) as usize
    }

    pub fn profile(&self, kind: DriverKind) -> DriverProfile {
        DriverProfile::of(kind, self.vehicle_length)
    }
}

/// Per-tick reward of a controlled vehicle.
pub fn highway_reward(cfg: &HighwayConfig, crashed: bool, lane: usize, speed: f64) -> f64 {
    let (lo, hi) = cfg.reward_speed_range;
    let crash = if crashed { cfg.collision_reward } else { 0.0 };
    let right = cfg.right_lane_reward * lane as f64 / (cfg.lanes - 1) as f64;
    let fast = cfg.high_speed_reward * ((speed - lo) / (hi - lo)).clamp(0.0, 1.0);
    crash + right + fast
}

/// Indices of all vehicles that overlap some other vehicle and were not
/// already crashed.
pub fn collision_check(vehicles: &[VehicleState]) -> Vec<usize> {
    let mut hit = vec![false; vehicles.len()];
    for i in 0..vehicles.len() {
        for j in i + 1..vehicles.len() {
            if vehicles[i].crashed && vehicles[j].crashed {
                continue;
            }
            if rectangles_overlap(&vehicles[i], &vehicles[j]) {
                hit[i] = true;
                hit[j] = true;
            }
        }
    }
    (0..vehicles.len()).filter(|&i| hit[i] && !vehicles[i].crashed).collect()
}

#[derive(Clone, Debug)]
pub struct Highway {
    cfg: HighwayConfig,
    /// Controlled vehicles first, then behavior vehicles; `id == index`.
    vehicles: Vec<VehicleState>,
    tick: usize,
    done: Vec<bool>,
    rng: ChaCha8Rng,
    reset_called: bool,
}

impl Highway {
    pub fn new(cfg: HighwayConfig) -> Self {
        let n = cfg.n_controlled;
        Self {
            cfg,
            vehicles: Vec::new(),
            tick: 0,
            done: vec![false; n],
            rng: ChaCha8Rng::seed_from_u64(0),
            reset_called: false,
        }
    }

    pub fn config(&self) -> &HighwayConfig {
        &self.cfg
    }

    pub fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    /// Replaces the traffic state; controlled vehicles must come first.
    pub fn set_vehicles(&mut self, vehicles: Vec<VehicleState>) {
        self.done = vehicles
            .iter()
            .take(self.cfg.n_controlled)
            .map(|v| v.crashed)
            .collect();
        self.vehicles = vehicles;
        self.reset_called = true;
    }

    fn driver_profile(&self, v: &VehicleState) -> DriverProfile {
        match v.kind {
            VehicleKind::Behavior(k) => self.cfg.profile(k),
            VehicleKind::Controlled => {
                let mut p = self.cfg.profile(DriverKind::Normal);
                p.max_speed = v.max_speed;
                p.max_accel = v.max_accel;
                p
            }
        }
    }

    fn occupies(v: &VehicleState, lane: usize) -> bool {
        v.lane == lane || v.target_lane == lane
    }

    /// Nearest vehicles ahead of and behind `x` in `lane`, skipping `skip`.
    pub fn neighbours(&self, x: f64, lane: usize, skip: usize) -> (Option<usize>, Option<usize>) {
        let mut ahead: Option<(f64, usize)> = None;
        let mut behind: Option<(f64, usize)> = None;
        for (j, v) in self.vehicles.iter().enumerate() {
            if j == skip || !Self::occupies(v, lane) {
                continue;
            }
            let d = v.x - x;
            if d > 0.0 {
                if ahead.is_none_or(|(b, _)| d < b) {
                    ahead = Some((d, j));
                }
            } else if behind.is_none_or(|(b, _)| d > b) {
                behind = Some((d, j));
            }
        }
        (ahead.map(|a| a.1), behind.map(|b| b.1))
    }

    /// IDM acceleration of `follower` were `leader` directly ahead of it.
    fn accel_behind(&self, follower: &VehicleState, leader: Option<&VehicleState>) -> f64 {
        let p = self.driver_profile(follower);
        match leader {
            Some(l) => {
                let v_lead = if l.crashed { 0.0 } else { l.speed };
                idm_acceleration(follower.speed, v_lead, l.x - follower.x, &p, follower.target_speed)
            }
            None => idm_acceleration(follower.speed, follower.speed, f64::INFINITY, &p, follower.target_speed),
        }
    }

    /// Accelerations for the lane-change test of vehicle `i` into `lane`.
    pub fn mobil_inputs(&self, i: usize, lane: usize) -> MobilInputs {
        let me = &self.vehicles[i];
        let get = |k: Option<usize>| k.map(|k| &self.vehicles[k]);
        let (new_pre, new_fol) = self.neighbours(me.x, lane, i);
        let (old_pre, old_fol) = self.neighbours(me.x, me.lane, i);
        let (new_pre, new_fol, old_pre, old_fol) = (get(new_pre), get(new_fol), get(old_pre), get(old_fol));
        let fol = |f: Option<&VehicleState>, lead: Option<&VehicleState>| {
            f.map_or(0.0, |f| self.accel_behind(f, lead))
        };
        MobilInputs {
            self_now: self.accel_behind(me, old_pre),
            self_after: self.accel_behind(me, new_pre),
            new_follower_now: fol(new_fol, new_pre),
            new_follower_after: fol(new_fol, Some(me)),
            old_follower_now: fol(old_fol, Some(me)),
            old_follower_after: fol(old_fol, old_pre),
        }
    }

    /// Lane the behavior vehicle `i` moves to, if any (left is tried first).
    pub fn lane_change_choice(&self, i: usize) -> Option<usize> {
        let v = &self.vehicles[i];
        let VehicleKind::Behavior(kind) = v.kind else {
            return None;
        };
        if v.crashed || v.lane != v.target_lane {
            return None;
        }
        let p = self.cfg.profile(kind);
        let candidates = [v.lane.checked_sub(1), Some(v.lane + 1).filter(|&l| l < self.cfg.lanes)];
        candidates.into_iter().flatten().find(|&lane| {
            let m = self.mobil_inputs(i, lane);
            mobil_decision(&m, self.cfg.mobil.politeness(kind), p.desired_decel, self.cfg.mobil.min_gain)
        })
    }

    /// A behavior vehicle mid-change gives up when another vehicle merging
    /// into the same lane is ahead of it and closer than its desired gap.
    pub fn abort_lane_change(&self, i: usize) -> bool {
        let v = &self.vehicles[i];
        if v.crashed || v.lane == v.target_lane || v.kind == VehicleKind::Controlled {
            return false;
        }
        let p = self.driver_profile(v);
        self.vehicles.iter().enumerate().any(|(j, o)| {
            if j == i || o.lane == o.target_lane || o.target_lane != v.target_lane {
                return false;
            }
            let d = o.x - v.x;
            let ab = (p.desired_accel * p.desired_decel.abs()).sqrt();
            let s_star = p.desired_front_distance
                + (v.speed * p.time_wanted + v.speed * (v.speed - o.speed) / (2.0 * ab)).max(0.0);
            d > 0.0 && d < s_star
        })
    }

    /// Acceleration and steering the low-level controllers command for vehicle `i`.
    pub fn controls(&self, i: usize) -> (f64, f64) {
        let v = &self.vehicles[i];
        let steer = steering_control(v, self.cfg.lane_center(v.target_lane), &self.cfg.gains);
        let accel = match v.kind {
            VehicleKind::Controlled => speed_control(v, &self.cfg.gains),
            VehicleKind::Behavior(_) => {
                let lead = |lane| self.neighbours(v.x, lane, i).0.map(|k| &self.vehicles[k]);
                let mut a = self.accel_behind(v, lead(v.lane));
                if v.target_lane != v.lane {
                    a = a.min(self.accel_behind(v, lead(v.target_lane)));
                }
                a
            }
        };
        (accel, steer)
    }

    /// Applies a meta-action to controlled vehicle `i`. Returns `false` when
    /// the action had to be degraded to idle.
    pub fn apply_meta_action(&mut self, i: usize, action: usize) -> bool {
        let lanes = self.cfg.lanes;
        let delta = self.cfg.speed_delta;
        let v = &mut self.vehicles[i];
        match action {
            LANE_LEFT | LANE_RIGHT => {
                let target = if action == LANE_LEFT {
                    v.target_lane.checked_sub(1)
                } else {
                    Some(v.target_lane + 1).filter(|&l| l < lanes)
                };
                match target {
                    Some(t) => {
                        v.target_lane = t;
                        true
                    }
                    None => false,
                }
            }
            FASTER => {
                v.target_speed = (v.target_speed + delta).min(v.max_speed);
                true
            }
            SLOWER => {
                v.target_speed = (v.target_speed - delta).max(0.0);
                true
            }
            _ => true,
        }
    }

    /// One simulation tick of all vehicles; returns ids newly crashed.
    pub fn simulate_tick(&mut self) -> Vec<usize> {
        let controls: Vec<(f64, f64)> = (0..self.vehicles.len())
            .map(|i| if self.vehicles[i].crashed { (0.0, 0.0) } else { self.controls(i) })
            .collect();
        for (v, (a, s)) in self.vehicles.iter_mut().zip(controls) {
            if v.crashed {
                continue;
            }
            *v = bicycle_step(v, a, s, self.cfg.dt);
            v.lane = self.cfg.lane_of(v.y);
        }
        let hit = collision_check(&self.vehicles);
        for &i in &hit {
            self.vehicles[i].crashed = true;
        }
        hit
    }

    fn spawn(&mut self) -> Result<Vec<VehicleState>, EnvError> {
        let cfg = &self.cfg;
        let total = cfg.n_controlled + cfg.n_behavior;
        let counts = cfg.composition_counts();
        let mut kinds: Vec<DriverKind> = DriverKind::ALL
            .iter()
            .zip(counts)
            .flat_map(|(k, c)| std::iter::repeat_n(*k, c))
            .collect();
        kinds.shuffle(&mut self.rng);
        let stride = total / cfg.n_controlled.max(1);
        let ego_slot = |k: usize| {
            cfg.n_controlled > 0 && k % stride == stride / 2 && k / stride < cfg.n_controlled
        };
        let mut placed: Vec<(f64, usize, Option<DriverKind>)> = Vec::with_capacity(total);
        let mut x = 0.0;
        let mut attempts = 0;
        let mut kinds_iter = kinds.into_iter();
        for k in 0..total {
            let kind = if ego_slot(k) { None } else { kinds_iter.next() };
            loop {
                let u: f64 = self.rng.random();
                x += (cfg.min_headway + -(cfg.mean_headway - cfg.min_headway) * (1.0 - u).ln()) / cfg.density;
                let lane = self.rng.random_range(0..cfg.lanes);
                let clear = placed
                    .iter()
                    .all(|(px, pl, _)| *pl != lane || (x - px).abs() >= cfg.min_lane_gap);
                attempts += 1;
                if attempts > cfg.spawn_retries * total.max(1) {
                    return Err(EnvError::InfeasibleSpawn(total));
                }
                if clear {
                    placed.push((x, lane, kind));
                    break;
                }
            }
        }
        let mut controlled = Vec::new();
        let mut behavior = Vec::new();
        for (x, lane, kind) in placed {
            let base = VehicleState {
                id: 0,
                kind: VehicleKind::Controlled,
                lane,
                target_lane: lane,
                x,
                y: cfg.lane_center(lane),
                heading: 0.0,
                speed: cfg.ego_initial_speed,
                target_speed: cfg.ego_initial_speed,
                max_speed: cfg.ego_max_speed,
                max_accel: cfg.ego_max_accel,
                length: cfg.vehicle_length,
                width: cfg.vehicle_width,
                crashed: false,
            };
            match kind {
                None => controlled.push(base),
                Some(k) => {
                    let p = cfg.profile(k);
                    let (lo, hi) = p.default_speed_range;
                    let v0 = self.rng.random_range(lo..=hi);
                    behavior.push(VehicleState {
                        kind: VehicleKind::Behavior(k),
                        speed: v0,
                        target_speed: v0,
                        max_speed: p.max_speed,
                        max_accel: p.max_accel,
                        ..base
                    });
                }
            }
        }
        let mut all = controlled;
        all.extend(behavior);
        for (i, v) in all.iter_mut().enumerate() {
            v.id = i as u32;
        }
        Ok(all)
    }

    fn entity(v: &VehicleState) -> EntityState {
        EntityState::new(v.id, [v.x, v.y], v.velocity())
    }

    fn scope(&self) -> Scope {
        Scope::Box {
            longitudinal: self.cfg.scope_longitudinal,
            lateral: self.cfg.scope_lateral,
        }
    }
}

impl Environment for Highway {
    fn num_agents(&self) -> usize {
        self.cfg.n_controlled
    }

    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn capacity(&self) -> usize {
        self.cfg.capacity
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
        self.vehicles = self.spawn()?;
        self.done = vec![false; self.cfg.n_controlled];
        self.reset_called = true;
        (0..self.num_agents()).map(|i| self.observe(i)).collect()
    }

    fn step(&mut self, actions: &[Option<usize>]) -> Result<StepResult, EnvError> {
        if !self.reset_called {
            return Err(EnvError::NotReset);
        }
        if actions.len() != self.num_agents() {
            return Err(EnvError::ActionCount {
                expected: self.num_agents(),
                got: actions.len(),
            });
        }
        if self.tick >= self.cfg.horizon {
            return Err(EnvError::EpisodeOver(self.tick));
        }
        if let Some(&a) = actions.iter().flatten().find(|&&a| a >= NUM_ACTIONS) {
            return Err(EnvError::InvalidAction {
                action: a,
                size: NUM_ACTIONS,
            });
        }
        let was_done = self.done.clone();
        let mut infos = vec![StepInfo::default(); self.num_agents()];
        for (i, a) in actions.iter().enumerate() {
            match (a, was_done[i]) {
                (Some(_), true) => infos[i].ignored_action = true,
                (Some(a), false) => infos[i].degraded_action = !self.apply_meta_action(i, *a),
                (None, _) => {}
            }
        }
        for i in self.cfg.n_controlled..self.vehicles.len() {
            if self.abort_lane_change(i) {
                self.vehicles[i].target_lane = self.vehicles[i].lane;
            } else if let Some(lane) = self.lane_change_choice(i) {
                self.vehicles[i].target_lane = lane;
            }
        }
        let mut crashed_now = vec![false; self.num_agents()];
        for _ in 0..self.cfg.substeps {
            for i in self.simulate_tick() {
                if i < self.num_agents() {
                    crashed_now[i] = true;
                }
            }
        }
        self.tick += 1;
        let finished = self.tick >= self.cfg.horizon;
        let agents = (0..self.num_agents())
            .map(|i| {
                let v = &self.vehicles[i];
                let reward = if was_done[i] {
                    0.0
                } else {
                    highway_reward(&self.cfg, crashed_now[i], v.lane, v.speed)
                };
                infos[i].collision = v.crashed;
                infos[i].speed = v.speed;
                self.done[i] = was_done[i] || v.crashed || finished;
                AgentStep {
                    observation: self.observe(i).expect("valid agent"),
                    reward,
                    done: self.done[i],
                    info: infos[i],
                }
            })
            .collect();
        Ok(StepResult { agents, finished })
    }

    fn observe(&self, agent: usize) -> Result<Observation, EnvError> {
        if agent >= self.num_agents() {
            return Err(EnvError::UnknownAgent(agent));
        }
        let ego = Self::entity(self.vehicles.get(agent).ok_or(EnvError::NotReset)?);
        Ok(build_observation(
            ego,
            self.vehicles.iter().map(Self::entity),
            self.scope(),
            SlotOrder::Distance,
            self.cfg.capacity,
        ))
    }

    fn agent_done(&self, agent: usize) -> bool {
        self.done.get(agent).copied().unwrap_or(true)
    }

    fn entities(&self) -> Vec<EntityState> {
        self.vehicles.iter().map(Self::entity).collect()
    }

    fn crashed(&self) -> Vec<bool> {
        self.vehicles.iter().map(|v| v.crashed).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mild_reset_counts() {
        let mut env = Highway::new(HighwayConfig::mild());
        let obs = env.reset(3).unwrap();
        assert_eq!(obs.len(), 5);
        assert_eq!(env.vehicles().len(), 55);
        let behavior = env
            .vehicles()
            .iter()
            .filter(|v| matches!(v.kind, VehicleKind::Behavior(_)))
            .count();
        assert_eq!(behavior, 50);
    }

    #[test]
    fn reward_endpoints() {
        let cfg = HighwayConfig::mild();
        assert!((highway_reward(&cfg, false, 7, 30.0) - 0.5).abs() < 1e-12);
        assert_eq!(highway_reward(&cfg, false, 0, 20.0), 0.0);
    }

    #[test]
    fn lane_right_in_rightmost_lane_degrades() {
        let mut env = Highway::new(HighwayConfig::mild());
        env.reset(1).unwrap();
        let mut vs = env.vehicles().to_vec();
        vs[0].lane = 7;
        vs[0].target_lane = 7;
        vs[0].y = 28.0;
        env.set_vehicles(vs);
        assert!(!env.apply_meta_action(0, LANE_RIGHT));
        assert_eq!(env.vehicles()[0].target_lane, 7);
    }
}
