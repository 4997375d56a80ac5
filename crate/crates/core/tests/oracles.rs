use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iplan::env::highway::{
    highway_reward, idm_acceleration, mobil_decision, rectangles_overlap, DriverKind, DriverProfile, HighwayConfig,
    MobilInputs, VehicleKind, VehicleState,
};
use iplan::env::navigation::{AgentKind, NavAgentProfile, NavConfig, NavWorld};
use iplan::env::{AgentTrajectory, EntityState, StepInfo};
use iplan::metrics::{average_speed, confidence_interval, success_rate, survival_time, AgentOutcome, EpisodeOutcome};
use iplan::numerics::{adam_update, gat_forward, gru_step, AdamConfig, AdamState, GatParams, Graph, GruParams, ParamStore, Tensor};
use iplan::ppo::compute_gae;
use iplan_oracles as oracle;

fn cases() -> ProptestConfig {
    ProptestConfig::with_cases(1000)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    oracle::relative_error(a, b, 1.0) <= tol
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn t_critical(dof: usize) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<usize, f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(t) = cache.lock().unwrap().get(&dof) {
        return *t;
    }
    let t = oracle::student_t_critical(0.95, dof as f64);
    cache.lock().unwrap().insert(dof, t);
    t
}

proptest! {
    #![proptest_config(cases())]

    #[test]
    fn idm_matches_scalar_formula(
        kind in 0usize..3,
        v in 0.0f64..45.0,
        v_lead in 0.0f64..45.0,
        gap in 0.5f64..200.0,
        v0 in 15.0f64..40.0,
    ) {
        let p = DriverProfile::of(DriverKind::ALL[kind], 5.0);
        let got = idm_acceleration(v, v_lead, gap, &p, v0);
        let want = oracle::idm(
            v, v_lead, gap, p.desired_accel, p.desired_decel, p.desired_front_distance,
            p.time_wanted, v0, p.max_accel, p.max_accel,
        );
        prop_assert!(close(got, want, 1e-12), "{got} vs {want}");
        prop_assert!(got.abs() <= p.max_accel);
    }

    #[test]
    fn gae_matches_double_loop(seed in any::<u64>(), n in 1usize..64, gamma in 0.8f64..1.0, lambda in 0.8f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = uniform(&mut rng, n, 5.0);
        let v = uniform(&mut rng, n, 5.0);
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
        let boot = rng.random_range(-5.0..5.0);
        let (a, ret) = compute_gae(&r, &v, &d, boot, gamma, lambda);
        let (oa, oret) = oracle::gae(&r, &v, &d, boot, gamma, lambda);
        for k in 0..n {
            prop_assert!(close(a[k], oa[k], 1e-10), "adv {k}: {} vs {}", a[k], oa[k]);
            prop_assert!(close(ret[k], oret[k], 1e-10));
        }
    }

    #[test]
    fn adam_matches_scalar_recurrence(p0 in -2.0f64..2.0, grads in prop::collection::vec(-3.0f64..3.0, 1..20), lr in 1e-4f64..1e-1) {
        let cfg = AdamConfig { max_grad_norm: None, ..AdamConfig::with_lr(lr) };
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(p0));
        let mut state = AdamState::new(cfg, &store);
        for &g in &grads {
            let mut graph = Graph::new();
            let x = graph.param(&store, id);
            let y = graph.scale(x, g);
            let mut gr = graph.backward(y).unwrap();
            adam_update(&mut store, &mut gr, &mut state).unwrap();
        }
        let want = oracle::adam_scalar(p0, &grads, lr, cfg.beta1, cfg.beta2, cfg.eps);
        prop_assert!(close(store.get(id).item(), want, 1e-12));
    }

    #[test]
    fn gru_matches_scalar_cell(seed in any::<u64>(), i in 1usize..6, h in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = GruParams::new(&mut store, "gru", i, h, &mut rng);
        let x = uniform(&mut rng, i, 2.0);
        let h0 = uniform(&mut rng, h, 1.0);
        let mut g = Graph::no_grad();
        let xv = g.constant(Tensor::row(x.clone()));
        let hv = g.constant(Tensor::row(h0.clone()));
        let out = gru_step(&mut g, &store, &p, xv, hv).unwrap();
        let want = oracle::gru_cell(
            &x, &h0,
            store.get(p.w_input).data(), store.get(p.w_hidden).data(),
            store.get(p.b_input).data(), store.get(p.b_hidden).data(),
        );
        for (a, b) in g.value(out).data().iter().zip(&want) {
            prop_assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn gat_matches_scalar_layer(seed in any::<u64>(), n in 1usize..7, f in 1usize..5, hid in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = GatParams::new(&mut store, "gat", f, hid, 0.2, &mut rng);
        let present: Vec<bool> = (0..n).map(|k| k == 0 || rng.random_bool(0.7)).collect();
        let feats: Vec<f64> = (0..n * f).map(|k| if present[k / f] { rng.random_range(-2.0..2.0) } else { 0.0 }).collect();
        let mut g = Graph::no_grad();
        let fv = g.constant(Tensor::matrix(n, f, feats.clone()));
        let out = gat_forward(&mut g, &store, &p, fv, &present, n).unwrap();
        let (att, nodes) = oracle::gat_layer(
            &feats, &present, f, store.get(p.weight).data(), store.get(p.attention).data(), hid, 0.2,
        );
        for (a, b) in g.value(out.attention).data().iter().zip(&att) {
            prop_assert!(close(*a, *b, 1e-12));
        }
        for (a, b) in g.value(out.nodes).data().iter().zip(&nodes) {
            prop_assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn highway_reward_matches_terms(crashed in any::<bool>(), lane in 0usize..8, speed in 0.0f64..45.0, chaotic in any::<bool>()) {
        let cfg = HighwayConfig::scenario(if chaotic { "chaotic" } else { "mild" }).unwrap();
        let got = highway_reward(&cfg, crashed, lane, speed);
        let want = oracle::highway_reward(crashed, lane, cfg.lanes, speed);
        prop_assert!(close(got, want, 1e-12), "{got} vs {want}");
    }

    #[test]
    fn navigation_reward_matches_terms(seed in any::<u64>(), spread in 0.05f64..1.0, hard in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nav = if hard { NavConfig::hard() } else { NavConfig::easy() };
        let mut pos = || [rng.random_range(-spread..spread), rng.random_range(-spread..spread)];
        let agents: Vec<EntityState> = (0..nav.agents.len()).map(|k| EntityState::new(k as u32, pos(), [0.0; 2])).collect();
        let landmarks: Vec<[f64; 2]> = (0..nav.landmarks).map(|_| pos()).collect();
        let profiles: Vec<NavAgentProfile> = nav.agents.iter().map(|k| NavAgentProfile::of(*k)).collect();
        let positions: Vec<(f64, f64)> = agents.iter().map(|a| (a.position[0], a.position[1])).collect();
        let sizes: Vec<f64> = profiles.iter().map(|p| p.size).collect();
        let ctrl: Vec<bool> = nav.agents.iter().map(|k| *k != AgentKind::Random).collect();
        let marks: Vec<(f64, f64)> = landmarks.iter().map(|l| (l[0], l[1])).collect();
        let world = NavWorld { profiles, agents, landmarks };
        for me in 0..positions.len() {
            let got = world.nav_reward(me, &nav);
            let want = oracle::navigation_reward(me, &positions, &sizes, &ctrl, &marks);
            prop_assert!(close(got, want, 1e-12), "agent {me}: {got} vs {want}");
        }
    }

    #[test]
    fn rectangle_overlap_matches_clipping(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || VehicleState {
            id: 0,
            kind: VehicleKind::Controlled,
            lane: 0,
            target_lane: 0,
            x: rng.random_range(-6.0..6.0),
            y: rng.random_range(-3.0..3.0),
            heading: rng.random_range(-0.6..0.6),
            speed: 0.0,
            target_speed: 0.0,
            max_speed: 40.0,
            max_accel: 5.0,
            length: rng.random_range(3.0..6.0),
            width: rng.random_range(1.5..2.5),
            crashed: false,
        };
        let (a, b) = (v(), v());
        let rect = |s: &VehicleState| oracle::rectangle(s.x, s.y, s.heading, s.length, s.width);
        prop_assert_eq!(rectangles_overlap(&a, &b), oracle::polygons_overlap(&rect(&a), &rect(&b)));
    }

    #[test]
    fn mobil_matches_rule(acc in prop::array::uniform6(-6.0f64..6.0), politeness in 0.0f64..1.0) {
        let m = MobilInputs {
            self_now: acc[0], self_after: acc[1],
            new_follower_now: acc[2], new_follower_after: acc[3],
            old_follower_now: acc[4], old_follower_after: acc[5],
        };
        prop_assert_eq!(
            mobil_decision(&m, politeness, 4.0, 0.2),
            oracle::mobil_accepts(acc[0], acc[1], acc[2], acc[3], acc[4], acc[5], politeness, 4.0, 0.2)
        );
    }

    #[test]
    fn confidence_interval_matches_textbook(xs in prop::collection::vec(-100.0f64..100.0, 2..40)) {
        let (mean, hw) = confidence_interval(&xs, 0.95).unwrap();
        let (om, ohw) = oracle::t_interval_with(&xs, t_critical(xs.len() - 1));
        prop_assert!(close(mean, om, 1e-9));
        prop_assert!(close(hw, ohw, 1e-9), "{hw} vs {ohw}");
        prop_assert!(hw >= 0.0);
    }

    #[test]
    fn metrics_match_counting(seed in any::<u64>(), episodes in 1usize..12, agents in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon = 90;
        let mut outcomes: Vec<EpisodeOutcome> = Vec::new();
        let (mut ok, mut lived_sum, mut speed_sum, mut total) = (0usize, 0usize, 0.0, 0usize);
        for _ in 0..episodes {
            let mut ep = Vec::new();
            for _ in 0..agents {
                let crash = rng.random_bool(0.4).then(|| rng.random_range(0..horizon));
                let len = crash.map_or(horizon, |c| c + 1);
                let speeds = uniform(&mut rng, len, 10.0).iter().map(|s| s + 25.0).collect::<Vec<_>>();
                let tr = AgentTrajectory {
                    observations: Vec::new(),
                    actions: vec![0; len],
                    rewards: vec![0.5; len],
                    dones: (0..len).map(|k| k + 1 == len).collect(),
                    infos: (0..len)
                        .map(|k| StepInfo { collision: Some(k) == crash, speed: speeds[k], ..Default::default() })
                        .collect(),
                };
                ep.push(AgentOutcome::from_trajectory(&tr, horizon));
                total += 1;
                ok += usize::from(crash.is_none());
                lived_sum += len;
                speed_sum += speeds.iter().sum::<f64>() / len as f64;
            }
            outcomes.push(ep);
        }
        let sr = success_rate(&outcomes).unwrap();
        let st = survival_time(&outcomes).unwrap();
        let sp = average_speed(&outcomes, true).unwrap();
        prop_assert!(close(sr, 100.0 * ok as f64 / total as f64, 1e-12));
        prop_assert!(close(st, lived_sum as f64 / total as f64, 1e-12));
        prop_assert!(close(sp, speed_sum / total as f64, 1e-12));
        prop_assert!((0.0..=100.0).contains(&sr));
        prop_assert!(st <= horizon as f64);
    }
}

#[test]
fn survival_counts_the_crash_tick() {
    let lived = |crash: Option<usize>| AgentOutcome {
        reward: 0.0,
        crash_tick: crash,
        mean_speed: 0.0,
        horizon: 90,
    };
    assert_eq!(survival_time(&[vec![lived(None)]]).unwrap(), 90.0);
    assert_eq!(survival_time(&[vec![lived(Some(30)), lived(None)]]).unwrap(), 60.0);
    assert_eq!(success_rate(&[vec![lived(None), lived(None)]]).unwrap(), 100.0);
    assert_eq!(success_rate(&[vec![lived(Some(1)), lived(Some(5))]]).unwrap(), 0.0);
}

#[test]
fn speed_is_undefined_on_navigation() {
    let o = vec![vec![AgentOutcome {
        reward: 0.0,
        crash_tick: None,
        mean_speed: 0.0,
        horizon: 50,
    }]];
    assert!(average_speed(&o, false).is_err());
}

#[test]
fn interval_of_one_to_ten() {
    let xs: Vec<f64> = (1..=10).map(f64::from).collect();
    let (mean, hw) = confidence_interval(&xs, 0.95).unwrap();
    let (om, ohw) = oracle::t_interval(&xs, 0.95);
    assert!((mean - om).abs() < 1e-9 && (hw - ohw).abs() < 1e-9);
    let (_, hw99) = confidence_interval(&xs, 0.99).unwrap();
    assert!(hw99 > hw);
    let (_, zero) = confidence_interval(&[3.0; 5], 0.95).unwrap();
    assert_eq!(zero, 0.0);
    assert!(confidence_interval(&[1.0], 0.95).is_err());
}
