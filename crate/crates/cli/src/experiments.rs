//! Scripted experiments shared by the acceptance suite and the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iplan::env::{build_observation, EntityState, Observation, Scope, SlotOrder};
use iplan::features::{slot_ids, FeatureScale};
use iplan::incentive::behavior::{BehaviorBatch, BehaviorConfig, BehaviorModule};
use iplan::incentive::instant::{InstantBatch, InstantConfig, InstantModule};
use iplan::numerics::NumericsError;

/// Highway-like scaling: 100 m longitudinal, 20 m lateral, 30 m/s.
pub fn traffic_scale() -> FeatureScale {
    FeatureScale {
        position: [100.0, 20.0],
        velocity: 30.0,
        id: None,
        ego_x: false,
    }
}

/// Episodes of straight constant-velocity traffic seen from vehicle 0, one
/// decision step per second. Every vehicle is observed in a fixed slot.
pub fn constant_velocity_scenes(seed: u64, scenes: usize, ticks: usize, vehicles: usize) -> Vec<Vec<Observation>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..scenes)
        .map(|_| {
            let start: Vec<EntityState> = (0..=vehicles)
                .map(|id| {
                    let x = if id == 0 { 0.0 } else { rng.random_range(-60.0..60.0) };
                    let lane = rng.random_range(0..4) as f64;
                    EntityState::new(id as u32, [x, 4.0 * lane], [rng.random_range(18.0..32.0), 0.0])
                })
                .collect();
            (0..ticks)
                .map(|t| {
                    let at: Vec<EntityState> = start
                        .iter()
                        .map(|e| {
                            let mut e = *e;
                            e.position[0] += e.velocity[0] * t as f64;
                            e
                        })
                        .collect();
                    build_observation(at[0], at[1..].iter().copied(), Scope::Full, SlotOrder::Id, vehicles)
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub behavior_initial: f64,
    pub behavior_final: f64,
    pub instant_initial: f64,
    pub instant_final: f64,
    /// Mean predicted-position error over the prediction horizon (m).
    pub ade: f64,
    /// Mean true displacement over the same targets (m).
    pub displacement: f64,
}

struct Batches {
    behavior: Vec<BehaviorBatch>,
    instant: Vec<InstantBatch>,
}

fn replay_all(
    behavior: &BehaviorModule,
    instant: &InstantModule,
    scenes: &[Vec<Observation>],
    scale: &FeatureScale,
) -> Result<Batches, NumericsError> {
    let dim = behavior.config.latent_dim;
    let mut out = Batches {
        behavior: Vec::new(),
        instant: Vec::new(),
    };
    for obs in scenes {
        let b = behavior.replay(obs, obs.len(), scale)?;
        let beta: Vec<Vec<f64>> = obs
            .iter()
            .zip(&b.latents)
            .map(|(o, l)| {
                let (ids, present) = slot_ids(o);
                l.slots(&ids, &present, dim)
            })
            .collect();
        let i = instant.replay(obs, &beta, obs.len(), scale)?;
        out.behavior.push(b.batch);
        out.instant.push(i.batch);
    }
    Ok(out)
}

fn mean_loss<B>(batches: &[B], f: impl Fn(&B) -> Result<Option<f64>, NumericsError>) -> Result<f64, NumericsError> {
    let mut s = 0.0;
    let mut n = 0;
    for b in batches {
        if let Some(l) = f(b)? {
            s += l;
            n += 1;
        }
    }
    Ok(s / n.max(1) as f64)
}

/// Trains both inference modules on synthetic traffic for `epochs` passes
/// over `scenes` episodes and reports losses before and after.
pub fn supervised_convergence(
    seed: u64,
    scenes: usize,
    epochs: usize,
    behavior_cfg: BehaviorConfig,
    instant_cfg: InstantConfig,
) -> Result<ConvergenceReport, NumericsError> {
    let scale = traffic_scale();
    let vehicles = 6;
    let train = constant_velocity_scenes(seed, scenes, 40, vehicles);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut behavior = BehaviorModule::new(behavior_cfg.clone(), &mut rng);
    let mut instant = InstantModule::new(instant_cfg, vehicles, behavior_cfg.latent_dim, &mut rng);

    let first = replay_all(&behavior, &instant, &train, &scale)?;
    let behavior_initial = mean_loss(&first.behavior, |b| behavior.eval_loss(b))?;
    let instant_initial = mean_loss(&first.instant, |b| instant.eval_loss(b))?;
    for _ in 0..epochs {
        let batches = replay_all(&behavior, &instant, &train, &scale)?;
        for (b, i) in batches.behavior.iter().zip(&batches.instant) {
            behavior.train_step(b, &mut rng)?;
            instant.train_step(i, &mut rng)?;
        }
    }
    let last = replay_all(&behavior, &instant, &train, &scale)?;
    let behavior_final = mean_loss(&last.behavior, |b| behavior.eval_loss(b))?;
    let instant_final = mean_loss(&last.instant, |b| instant.eval_loss(b))?;

    let test = constant_velocity_scenes(seed.wrapping_add(1), scenes.div_ceil(4), 40, vehicles);
    let held = replay_all(&behavior, &instant, &test, &scale)?;
    let (mut ade, mut disp) = (0.0, 0.0);
    for b in &held.instant {
        let (e, d) = instant.displacement_errors(b, &scale)?;
        ade += e;
        disp += d;
    }
    let k = held.instant.len() as f64;
    Ok(ConvergenceReport {
        behavior_initial,
        behavior_final,
        instant_initial,
        instant_final,
        ade: ade / k,
        displacement: disp / k,
    })
}
