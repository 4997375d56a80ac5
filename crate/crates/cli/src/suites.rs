//! Randomized comparisons of the numerics against the scalar oracles.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iplan::env::highway::{
    highway_reward, idm_acceleration, mobil_decision, rectangles_overlap, DriverKind, DriverProfile, HighwayConfig,
    MobilInputs, VehicleKind, VehicleState,
};
use iplan::env::navigation::{AgentKind, NavAgentProfile, NavConfig, NavWorld};
use iplan::env::EntityState;
use iplan::incentive::behavior::soft_update;
use iplan::metrics::Interval;
use iplan::numerics::{
    adam_update, gat_forward, gru_step, AdamConfig, AdamState, GatParams, Graph, GruParams, ParamStore, Tensor,
};
use iplan::ppo::compute_gae;
use iplan_oracles as oracle;

/// Worst discrepancy of one suite against its tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst <= self.tolerance
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<14} cases={:<5} worst={:.3e} tol={:.1e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

fn rel(a: f64, b: f64) -> f64 {
    oracle::relative_error(a, b, 1.0)
}

fn worst_of(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max)
}

fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)));
    r
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

pub fn gae(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = rng_for(seed, "gae");
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(1..40);
        let r = uniform_vec(&mut rng, n, 5.0);
        let v = uniform_vec(&mut rng, n, 5.0);
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
        let boot = rng.random_range(-5.0..5.0);
        let gamma = rng.random_range(0.8..1.0);
        let lambda = rng.random_range(0.8..1.0);
        let (a, ret) = compute_gae(&r, &v, &d, boot, gamma, lambda);
        let (oa, oret) = oracle::gae(&r, &v, &d, boot, gamma, lambda);
        worst = worst.max(worst_of(&a, &oa)).max(worst_of(&ret, &oret));
    }
    SuiteResult {
        name: "gae",
        cases,
        worst,
        tolerance: 1e-10,
    }
}

pub fn idm(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = rng_for(seed, "idm");
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let kind = DriverKind::ALL[rng.random_range(0..3)];
        let p = DriverProfile::of(kind, 5.0);
        let v = rng.random_range(0.0..45.0);
        let v_lead = rng.random_range(0.0..45.0);
        let gap = rng.random_range(0.5..150.0);
        let v0 = rng.random_range(15.0..p.max_speed);
        let got = idm_acceleration(v, v_lead, gap, &p, v0);
        let want = oracle::idm(
            v,
            v_lead,
            gap,
            p.desired_accel,
            p.desired_decel,
            p.desired_front_distance,
            p.time_wanted,
            v0,
            p.max_accel,
            p.max_accel,
        );
        worst = worst.max(rel(got, want));
    }
    SuiteResult {
        name: "idm",
        cases,
        worst,
        tolerance: 1e-12,
    }
}

pub fn adam(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = rng_for(seed, "adam");
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let p0 = rng.random_range(-2.0..2.0);
        let len = rng.random_range(1..20);
        let grads = uniform_vec(&mut rng, len, 3.0);
        let cfg = AdamConfig {
            lr: rng.random_range(1e-4..1e-1),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        };
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(p0));
        let mut state = AdamState::new(cfg, &store);
        for &g in &grads {
            let mut graph = Graph::new();
            let x = graph.param(&store, id);
            let Ok(y) = graph.mul_const(x, Tensor::scalar(g)) else {
                return failed("adam", cases);
            };
            let loss = graph.sum(y);
            let Ok(mut gr) = graph.backward(loss) else {
                return failed("adam", cases);
            };
            if adam_update(&mut store, &mut gr, &mut state).is_err() {
                return failed("adam", cases);
            }
        }
        let want = oracle::adam_scalar(p0, &grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        worst = worst.max(rel(store.get(id).item(), want));
    }
    SuiteResult {
        name: "adam",
        cases,
        worst,
        tolerance: 1e-12,
    }
}

fn failed(name: &'static str, cases: usize) -> SuiteResult {
    SuiteResult {
        name,
        cases,
        worst: f64::INFINITY,
        tolerance: 0.0,
    }
}

pub fn gru(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = rng_for(seed, "gru");
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (i, h) = (rng.random_range(1..6), rng.random_range(1..6));
        let mut store = ParamStore::new();
        let p = GruParams::new(&mut store, "gru", i, h, &mut rng);
        let x = uniform_vec(&mut rng, i, 2.0);
        let h0 = uniform_vec(&mut rng, h, 1.0);
        let mut g = Graph::no_grad();
        let xv = g.constant(Tensor::row(x.clone()));
        let hv = g.constant(Tensor::row(h0.clone()));
        let Ok(out) = gru_step(&mut g, &store, &p, xv, hv) else {
            return failed("gru", cases);
        };
        let want = oracle::gru_cell(
            &x,
            &h0,
            store.get(p.w_input).data(),
            store.get(p.w_hidden).data(),
            store.get(p.b_input).data(),
            store.get(p.b_hidden).data(),
        );
        worst = worst.max(worst_of(g.value(out).data(), &want));
    }
    SuiteResult {
        name: "gru",
        cases,
        worst,
        tolerance: 1e-12,
    }
}

pub fn gat(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = rng_for(seed, "gat");
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (n, f, hid) = (rng.random_range(1..7), rng.random_range(1..5), rng.random_range(1..5));
        let mut store = ParamStore::new();
        let p = GatParams::new(&mut store, "gat", f, hid, 0.2, &mut rng);
        let mut present: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        present[0] = true;
        let feats: Vec<f64> = (0..n * f)
            .map(|k| if present[k / f] { rng.random_range(-2.0..2.0) } else { 0.0 })
            .collect();
        let mut g = Graph::no_grad();
        let fv = g.constant(Tensor::matrix(n, f, feats.clone()));
        let Ok(out) = gat_forward(&mut g, &store, &p, fv, &present, n) else {
            return failed("gat", cases);
        };
        let (att, nodes) = oracle::gat_layer(
            &feats,
            &present,
            f,
            store.get(p.weight).data(),
            store.get(p.attention).data(),
            hid,
            p.leaky_slope,
        );
        worst = worst
            .max(worst_of(g.value(out.attention).data(), &att))
            .max(worst_of(g.value(out.nodes).data(), &nodes));
    }
    SuiteResult {
        name: "gat",
        cases,
        worst,
        tolerance: 1e-12,
    }
}

pub fn gradients(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = rng_for(seed, "gradients");
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (b, i, o) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(2..5));
        let x = Tensor::matrix(b, i, uniform_vec(&mut rng, b * i, 1.0));
        let w0 = uniform_vec(&mut rng, i * o, 1.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..o)).collect();
        let loss_of = |w: &[f64], grad: bool| -> Option<(f64, Vec<f64>)> {
            let mut g = if grad { Graph::new() } else { Graph::no_grad() };
            let xv = g.constant(x.clone());
            let wv = g.leaf(Tensor::matrix(i, o, w.to_vec()), grad);
            let z = g.matmul(xv, wv).ok()?;
            let z = g.tanh(z);
            let lp = g.log_softmax_rows(z);
            let picked: Vec<f64> = (0..b * o).map(|k| if labels[k / o] == k % o { 1.0 } else { 0.0 }).collect();
            let nll = g.mul_const(lp, Tensor::matrix(b, o, picked)).ok()?;
            let nll = g.mean(nll);
            let loss = g.neg(nll);
            let value = g.value(loss).item();
            if !grad {
                return Some((value, Vec::new()));
            }
            let gr = g.backward(loss).ok()?;
            Some((value, gr.wrt(wv)?.data().to_vec()))
        };
        let Some((_, analytic)) = loss_of(&w0, true) else {
            return failed("gradients", cases);
        };
        let numeric = oracle::central_difference(&mut |w| loss_of(w, false).map_or(f64::NAN, |r| r.0), &w0, 1e-6);
        let err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| oracle::relative_error(*a, *n, 1e-3))
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    SuiteResult {
        name: "gradients",
        cases,
        worst,
        tolerance: 1e-4,
    }
}

pub fn rewards(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = rng_for(seed, "rewards");
    let mut worst: f64 = 0.0;
    let hw = HighwayConfig::scenario("mild").expect("built-in scenario");
    let nav = NavConfig::hard();
    for _ in 0..cases {
        let crashed = rng.random_bool(0.2);
        let lane = rng.random_range(0..hw.lanes);
        let speed = rng.random_range(0.0..40.0);
        worst = worst.max(rel(
            highway_reward(&hw, crashed, lane, speed),
            oracle::highway_reward(crashed, lane, hw.lanes, speed),
        ));

        let spread = rng.random_range(0.05..1.0);
        let mut pos = || [rng.random_range(-spread..spread), rng.random_range(-spread..spread)];
        let agents: Vec<EntityState> = (0..nav.agents.len())
            .map(|k| EntityState::new(k as u32, pos(), [0.0, 0.0]))
            .collect();
        let landmarks: Vec<[f64; 2]> = (0..nav.landmarks).map(|_| pos()).collect();
        let profiles: Vec<NavAgentProfile> = nav.agents.iter().map(|k| NavAgentProfile::of(*k)).collect();
        let world = NavWorld {
            profiles: profiles.clone(),
            agents: agents.clone(),
            landmarks: landmarks.clone(),
        };
        let positions: Vec<(f64, f64)> = agents.iter().map(|a| (a.position[0], a.position[1])).collect();
        let sizes: Vec<f64> = profiles.iter().map(|p| p.size).collect();
        let ctrl: Vec<bool> = nav.agents.iter().map(|k| *k != AgentKind::Random).collect();
        let marks: Vec<(f64, f64)> = landmarks.iter().map(|l| (l[0], l[1])).collect();
        for me in 0..agents.len() {
            worst = worst.max(rel(
                world.nav_reward(me, &nav),
                oracle::navigation_reward(me, &positions, &sizes, &ctrl, &marks),
            ));
        }
    }
    SuiteResult {
        name: "rewards",
        cases,
        worst,
        tolerance: 1e-12,
    }
}

fn vehicle(rng: &mut ChaCha8Rng) -> VehicleState {
    VehicleState {
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
    }
}

/// Fraction of rectangle pairs on which the two overlap tests disagree.
pub fn collision(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = rng_for(seed, "collision");
    let mut wrong = 0usize;
    for _ in 0..cases {
        let (a, b) = (vehicle(&mut rng), vehicle(&mut rng));
        let rect = |v: &VehicleState| oracle::rectangle(v.x, v.y, v.heading, v.length, v.width);
        if rectangles_overlap(&a, &b) != oracle::polygons_overlap(&rect(&a), &rect(&b)) {
            wrong += 1;
        }
    }
    SuiteResult {
        name: "collision",
        cases,
        worst: wrong as f64 / cases.max(1) as f64,
        tolerance: 0.0,
    }
}

pub fn mobil(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = rng_for(seed, "mobil");
    let mut wrong = 0usize;
    for _ in 0..cases {
        let mut a = || rng.random_range(-6.0..6.0);
        let m = MobilInputs {
            self_now: a(),
            self_after: a(),
            new_follower_now: a(),
            new_follower_after: a(),
            old_follower_now: a(),
            old_follower_after: a(),
        };
        let politeness = [0.0, 0.3, 0.6][rng.random_range(0..3)];
        let got = mobil_decision(&m, politeness, 4.0, 0.2);
        let want = oracle::mobil_accepts(
            m.self_now,
            m.self_after,
            m.new_follower_now,
            m.new_follower_after,
            m.old_follower_now,
            m.old_follower_after,
            politeness,
            4.0,
            0.2,
        );
        wrong += usize::from(got != want);
    }
    SuiteResult {
        name: "mobil",
        cases,
        worst: wrong as f64 / cases.max(1) as f64,
        tolerance: 0.0,
    }
}

/// Bitwise agreement; the worst value counts mismatching components.
pub fn soft_updates(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = rng_for(seed, "soft-update");
    let mut wrong = 0usize;
    for c in 0..cases {
        let n = rng.random_range(1..12);
        let e = uniform_vec(&mut rng, n, 3.0);
        let p = uniform_vec(&mut rng, n, 3.0);
        let eta = match c % 3 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        };
        let got = soft_update(&e, &p, eta);
        let want = oracle::soft_update(&e, &p, eta);
        wrong += got.iter().zip(&want).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        if eta == 0.0 {
            wrong += got.iter().zip(&p).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        }
        if eta == 1.0 {
            wrong += got.iter().zip(&e).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        }
    }
    SuiteResult {
        name: "soft-update",
        cases,
        worst: wrong as f64,
        tolerance: 0.0,
    }
}

pub fn intervals(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = rng_for(seed, "intervals");
    let mut crit: HashMap<usize, f64> = HashMap::new();
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(2..40);
        let xs = uniform_vec(&mut rng, n, 50.0);
        let Ok(got) = Interval::of(&xs, 0.95) else {
            return failed("intervals", cases);
        };
        let t = *crit
            .entry(n)
            .or_insert_with(|| oracle::student_t_critical(0.95, (n - 1) as f64));
        let (mean, hw) = oracle::t_interval_with(&xs, t);
        worst = worst.max(rel(got.mean, mean)).max(rel(got.half_width, hw));
    }
    SuiteResult {
        name: "intervals",
        cases,
        worst,
        tolerance: 1e-7,
    }
}

/// Every suite, `cases` random inputs each.
pub fn run_all(seed: u64, cases: usize) -> Vec<SuiteResult> {
    vec![
        gae(seed, cases),
        idm(seed, cases),
        adam(seed, cases),
        gru(seed, cases),
        gat(seed, cases),
        gradients(seed, cases / 4),
        rewards(seed, cases),
        collision(seed, cases),
        mobil(seed, cases),
        soft_updates(seed, cases),
        intervals(seed, cases),
    ]
}
