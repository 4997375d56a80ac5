use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iplan::incentive::masked_l1;
use iplan::numerics::{gat_forward, gru_step, GatParams, Gradients, Graph, GruParams, Linear, ParamStore, Tensor, Var};
use iplan::ppo::{PpoBatch, PpoConfig, PpoController};
use iplan_oracles::{central_difference, relative_error};

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Worst relative error between backprop and central differences over every
/// scalar of every parameter in `store`.
fn check_store(store: &ParamStore, loss: impl Fn(&ParamStore, &mut Graph) -> Var) -> f64 {
    let mut g = Graph::new();
    let root = loss(store, &mut g);
    let grads: Gradients = g.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        let base = store.get(id).data().to_vec();
        let analytic = grads
            .param(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; base.len()]);
        let mut probe = store.clone();
        let numeric = central_difference(
            &mut |x| {
                probe.get_mut(id).data_mut().copy_from_slice(x);
                let mut g = Graph::no_grad();
                let v = loss(&probe, &mut g);
                g.value(v).item()
            },
            &base,
            H,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n, FLOOR));
        }
    }
    worst
}

/// Same check with respect to a leaf input instead of parameters.
fn check_leaf(x0: &[f64], rows: usize, cols: usize, f: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::matrix(rows, cols, x0.to_vec()), true);
    let root = f(&mut g, x);
    let grads = g.backward(root).unwrap();
    let analytic = grads.wrt(x).unwrap().data().to_vec();
    let numeric = central_difference(
        &mut |xs| {
            let mut g = Graph::no_grad();
            let x = g.constant(Tensor::matrix(rows, cols, xs.to_vec()));
            let v = f(&mut g, x);
            g.value(v).item()
        },
        x0,
        H,
    );
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n, FLOOR))
        .fold(0.0, f64::max)
}

/// A fixed random projection turns a matrix output into a scalar loss that
/// exercises every entry.
fn project(g: &mut Graph, v: Var, rng_seed: u64) -> Var {
    let (r, c) = (g.value(v).rows(), g.value(v).cols());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = Tensor::matrix(r, c, uniform(&mut rng, r * c, 1.0));
    let y = g.mul_const(v, w).unwrap();
    g.sum(y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn linear_layer(seed in any::<u64>(), b in 1usize..4, i in 1usize..5, o in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", i, o, &mut rng);
        let x = Tensor::matrix(b, i, uniform(&mut rng, b * i, 1.0));
        let err = check_store(&store, |s, g| {
            let xv = g.constant(x.clone());
            let y = lin.forward(g, s, xv).unwrap();
            let y = g.tanh(y);
            project(g, y, seed)
        });
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn gru_cell(seed in any::<u64>(), b in 1usize..3, i in 1usize..5, h in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = GruParams::new(&mut store, "gru", i, h, &mut rng);
        let x = Tensor::matrix(b, i, uniform(&mut rng, b * i, 1.0));
        let h0 = Tensor::matrix(b, h, uniform(&mut rng, b * h, 1.0));
        let err = check_store(&store, |s, g| {
            let xv = g.constant(x.clone());
            let hv = g.constant(h0.clone());
            let h1 = gru_step(g, s, &p, xv, hv).unwrap();
            let h2 = gru_step(g, s, &p, xv, h1).unwrap();
            project(g, h2, seed)
        });
        prop_assert!(err < TOL, "relative error {err}");
        let err = check_leaf(h0.data(), b, h, |g, hv| {
            let xv = g.constant(x.clone());
            let h1 = gru_step(g, &store, &p, xv, hv).unwrap();
            project(g, h1, seed)
        });
        prop_assert!(err < TOL, "hidden-state relative error {err}");
    }

    #[test]
    fn gat_layer(seed in any::<u64>(), groups in 1usize..3, n in 1usize..5, f in 1usize..4, hid in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = GatParams::new(&mut store, "gat", f, hid, 0.2, &mut rng);
        let present: Vec<bool> = (0..groups * n).map(|k| k % n == 0 || rng.random_bool(0.7)).collect();
        let feats = Tensor::matrix(groups * n, f, uniform(&mut rng, groups * n * f, 1.0));
        let err = check_store(&store, |s, g| {
            let fv = g.constant(feats.clone());
            let out = gat_forward(g, s, &p, fv, &present, n).unwrap();
            let a = project(g, out.nodes, seed);
            let b = project(g, out.attention, seed ^ 1);
            g.add(a, b).unwrap()
        });
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn softmax_rows(seed in any::<u64>(), r in 1usize..4, c in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = uniform(&mut rng, r * c, 3.0);
        let mask: Vec<bool> = (0..r * c).map(|k| k % c == 0 || rng.random_bool(0.8)).collect();
        let err = check_leaf(&x0, r, c, |g, x| {
            let s = g.softmax_rows(x, Some(mask.clone())).unwrap();
            project(g, s, seed)
        });
        prop_assert!(err < TOL, "softmax relative error {err}");
        let err = check_leaf(&x0, r, c, |g, x| {
            let s = g.log_softmax_rows(x);
            project(g, s, seed)
        });
        prop_assert!(err < TOL, "log-softmax relative error {err}");
    }

    #[test]
    fn masked_l1_loss(seed in any::<u64>(), frames in 1usize..4, slots in 1usize..4, width in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = slots * width;
        let preds0: Vec<Vec<f64>> = (0..frames).map(|_| uniform(&mut rng, n, 1.0)).collect();
        // Keep predictions away from the kink of |x| at the target.
        let targets: Vec<Vec<f64>> = preds0
            .iter()
            .map(|p| p.iter().map(|x| x + if rng.random_bool(0.5) { 0.3 } else { -0.3 }).collect())
            .collect();
        let mut valid: Vec<Vec<bool>> = (0..frames).map(|_| (0..slots).map(|_| rng.random_bool(0.7)).collect()).collect();
        valid[0][0] = true;
        let flat: Vec<f64> = preds0.concat();
        let err = check_leaf(&flat, frames, n, |g, x| {
            let parts: Vec<Var> = (0..frames).map(|k| g.slice_rows(x, k, k + 1).unwrap()).collect();
            masked_l1(g, &parts, &targets, &valid, width).unwrap()
        });
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn ppo_loss(seed in any::<u64>(), n in 2usize..8, input in 1usize..6, actions in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PpoConfig { hidden: 6, ..PpoConfig::default() };
        let ctrl = PpoController::new(cfg, input, actions, &mut rng);
        let inputs = Tensor::matrix(n, input, uniform(&mut rng, n * input, 1.0));
        let acts: Vec<usize> = (0..n).map(|_| rng.random_range(0..actions)).collect();
        let current: Vec<f64> = {
            let mut g = Graph::no_grad();
            let x = g.constant(inputs.clone());
            let (logp, _) = ctrl.forward(&mut g, x).unwrap();
            acts.iter().enumerate().map(|(r, &a)| g.value(logp).get(r, a)).collect()
        };
        let batch = PpoBatch {
            inputs,
            actions: acts,
            old_log_probs: current.iter().map(|l| l + rng.random_range(-0.5..0.5)).collect(),
            advantages: uniform(&mut rng, n, 2.0),
            returns: uniform(&mut rng, n, 2.0),
        };
        for actor in [true, false] {
            let store = if actor { &ctrl.actor_store } else { &ctrl.critic_store };
            let err = check_store(store, |s, g| {
                let mut c = ctrl.clone();
                if actor {
                    c.actor_store = s.clone();
                } else {
                    c.critic_store = s.clone();
                }
                c.loss(g, &batch).unwrap().total
            });
            prop_assert!(err < TOL, "relative error {err} (actor: {actor})");
        }
    }
}
