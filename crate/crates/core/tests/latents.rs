use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iplan::config::{Algorithm, EnvSpec, TrainConfig};
use iplan::env::{Environment, HistoryBuffer, Observation};
use iplan::features::{slot_ids, FeatureScale};
use iplan::incentive::behavior::{soft_update, BehaviorConfig, BehaviorModule, UpdateMode, WindowRows};
use iplan::incentive::Latents;
use iplan::numerics::{Graph, Tensor};
use iplan::trainer::Trainer;

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

/// Agent 0's observations over one navigation episode with random actions.
fn nav_observations(seed: u64, ticks: usize) -> (Vec<Observation>, FeatureScale) {
    let spec = EnvSpec::navigation("easy");
    let mut env = spec.build().unwrap();
    let scale = env.feature_scale();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = vec![env.reset(seed).unwrap()[0].clone()];
    for _ in 1..ticks {
        let actions: Vec<Option<usize>> = (0..env.num_agents()).map(|_| Some(rng.random_range(0..env.num_actions()))).collect();
        obs.push(env.step(&actions).unwrap().agents[0].observation.clone());
    }
    (obs, scale)
}

/// Runs the module's recurrence and checks every tick against the blend of a
/// separately computed encoder output. Returns the per-tick latents.
fn check_recurrence(b: &BehaviorModule, obs: &[Observation], scale: &FeatureScale, eta: impl Fn(usize) -> f64) -> Vec<Latents> {
    let dim = b.config.latent_dim;
    let mut history = HistoryBuffer::new(b.config.t_h);
    let mut latents = Latents::default();
    let mut out = Vec::new();
    for (t, o) in obs.iter().enumerate() {
        let rows = WindowRows::build(&history, o, t, scale);
        let prev = latents.gather(&rows.ids, dim);
        let mut g = Graph::no_grad();
        let p = g.constant(Tensor::matrix(rows.rows(), dim, prev.clone()));
        let e = b.encode(&mut g, &rows.steps, rows.rows(), p).unwrap();
        let want = iplan_oracles::soft_update(g.value(e).data(), &prev, eta(t));
        b.update(&rows, &mut latents, t).unwrap();
        assert_eq!(bits(&latents.gather(&rows.ids, dim)), bits(&want), "tick {t}");
        history.push(t, o);
        out.push(latents.clone());
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn soft_update_is_the_convex_blend_bitwise(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..16),
        eta in 0.0f64..1.0,
    ) {
        let (e, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let got = soft_update(&e, &p, eta);
        let want: Vec<f64> = e.iter().zip(&p).map(|(e, p)| eta * e + (1.0 - eta) * p).collect();
        prop_assert_eq!(bits(&got), bits(&want));
        prop_assert_eq!(bits(&soft_update(&e, &p, 0.0)), bits(&p));
        prop_assert_eq!(bits(&soft_update(&e, &p, 1.0)), bits(&e));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn encoder_recurrence_follows_the_soft_update(seed in any::<u64>(), pick in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eta = [0.0, 1.0, rng.random_range(0.0..1.0)][pick];
        let cfg = BehaviorConfig { t_h: 5, eta, ..BehaviorConfig::default() };
        let b = BehaviorModule::new(cfg, &mut rng);
        let (obs, scale) = nav_observations(seed, 12);
        let per_tick = check_recurrence(&b, &obs, &scale, |_| eta);
        if eta == 0.0 {
            for l in &per_tick {
                for id in 0..6 {
                    if let Some(v) = l.get(id) {
                        prop_assert!(v.iter().all(|x| *x == 0.0));
                    }
                }
            }
        }
    }
}

#[test]
fn hard_mode_switches_on_the_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = BehaviorConfig {
        t_h: 5,
        update: UpdateMode::Hard { interval: 4 },
        ..BehaviorConfig::default()
    };
    assert_eq!((0..8).map(|t| cfg.adopt_weight(t)).collect::<Vec<_>>(), [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let b = BehaviorModule::new(cfg.clone(), &mut rng);
    let (obs, scale) = nav_observations(3, 12);
    let per_tick = check_recurrence(&b, &obs, &scale, |t| cfg.adopt_weight(t));
    let ego = obs[0].ego.id;
    for t in 1..per_tick.len() {
        let (a, c) = (per_tick[t - 1].get(ego).unwrap(), per_tick[t].get(ego).unwrap());
        if (t + 1) % 4 == 0 {
            assert_ne!(bits(a), bits(c), "tick {t} should adopt");
        } else {
            assert_eq!(bits(a), bits(c), "tick {t} should hold");
        }
    }
}

#[test]
fn rollout_latents_match_posthoc_replay() {
    let cfg = TrainConfig::new(EnvSpec::navigation("easy"), Algorithm::Iplan);
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.train_steps(50).unwrap();
    assert_eq!(trainer.episodes(), 1);
    let log = trainer.last_log().unwrap().clone();
    let scale = trainer.scale.clone();
    for (i, slot) in trainer.agents.iter().enumerate() {
        let ep = slot.store.back().unwrap();
        let b = slot.model.behavior.as_ref().unwrap();
        let dim = b.config.latent_dim;
        let replay = b.replay(&ep.observations, ep.ticks, &scale).unwrap();
        for t in 0..ep.ticks {
            let (ids, present) = slot_ids(&ep.observations[t]);
            let beta = replay.latents[t].slots(&ids, &present, dim);
            assert_eq!(bits(&beta), bits(&ep.beta[t]), "agent {i} tick {t} beta");
            let trace = log.ticks[t + 1].latents[i].as_ref().unwrap();
            assert_eq!(bits(&trace.beta), bits(&beta), "agent {i} tick {t} logged beta");
        }
        let m = slot.model.instant.as_ref().unwrap();
        let zetas = m.replay(&ep.observations, &ep.beta, ep.ticks, &scale).unwrap().latents;
        for (t, z) in zetas.iter().enumerate() {
            let trace = log.ticks[t + 1].latents[i].as_ref().unwrap();
            assert_eq!(bits(&trace.zeta), bits(z), "agent {i} tick {t} zeta");
        }
    }
}
