use proptest::prelude::*;

use iplan::config::{Algorithm, EnvSpec, TrainConfig};
use iplan::parallel::Parallelism;
use iplan::ppo::ValueNorm;
use iplan::trainer::{evaluate, EvalPolicy, Trainer};

fn nav(algorithm: Algorithm) -> TrainConfig {
    TrainConfig::new(EnvSpec::navigation("easy"), algorithm)
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn value_norm_merges_like_one_batch(xs in prop::collection::vec(-100.0f64..100.0, 1..60), cuts in prop::collection::vec(0usize..60, 0..5)) {
        let mut cuts: Vec<usize> = cuts.into_iter().map(|c| c % xs.len()).collect();
        cuts.push(0);
        cuts.push(xs.len());
        cuts.sort();
        let mut vn = ValueNorm::default();
        for w in cuts.windows(2) {
            vn.observe(&xs[w[0]..w[1]]);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let m2: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
        prop_assert_eq!(vn.count, n);
        prop_assert!((vn.mean - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
        prop_assert!((vn.m2 - m2).abs() <= 1e-9 * (1.0 + m2));
    }
}

#[test]
fn algorithm_selects_modules() {
    let want = [
        (Algorithm::Iplan, vec!["behavior", "instant"]),
        (Algorithm::IplanBm, vec!["behavior"]),
        (Algorithm::IplanGat, vec!["instant"]),
        (Algorithm::Ippo, vec![]),
    ];
    for (a, modules) in want {
        let t = Trainer::new(nav(a)).unwrap();
        for m in t.models() {
            assert_eq!(m.modules(), modules, "{a:?}");
        }
    }
}

#[test]
fn ippo_rollout_has_zero_latents_and_ppo_only_updates() {
    let mut t = Trainer::new(nav(Algorithm::Ippo)).unwrap();
    let report = t.train_steps(300).unwrap();
    let log = t.last_log().unwrap();
    for rec in &log.ticks[1..] {
        for trace in rec.latents.iter().flatten() {
            assert!(trace.beta.iter().all(|x| *x == 0.0));
            assert!(trace.zeta.iter().all(|x| *x == 0.0));
            assert!(trace.attention.is_none());
        }
    }
    assert_eq!(report.phases.len(), 1);
    for a in &report.phases[0].agents {
        assert!(a.ppo.is_some());
        assert_eq!((a.behavior_loss, a.instant_loss), (None, None));
    }
}

#[test]
fn episodes_last_exactly_the_horizon() {
    let mut t = Trainer::new(nav(Algorithm::Iplan)).unwrap();
    let report = t.train_steps(500).unwrap();
    let ends: Vec<usize> = report.episodes.iter().map(|e| e.step).collect();
    assert_eq!(ends, (1..=10).map(|k| 50 * k).collect::<Vec<_>>());
    assert_eq!(t.last_log().unwrap().ticks.len(), 51);
}

#[test]
fn one_sample_means_one_pass_per_module() {
    let mut cfg = nav(Algorithm::Iplan);
    cfg.k_samples = 1;
    let mut t = Trainer::new(cfg).unwrap();
    t.train_steps(50).unwrap();
    for s in &t.agents {
        assert_eq!(s.store.len(), 1);
        assert_eq!(s.model.behavior.as_ref().unwrap().optimizer_steps(), 0);
    }
    let stats = t.gradient_phase();
    for (s, a) in t.agents.iter().zip(&stats.agents) {
        assert_eq!(s.model.behavior.as_ref().unwrap().optimizer_steps(), 1);
        assert_eq!(s.model.instant.as_ref().unwrap().optimizer_steps(), 1);
        assert!(a.behavior_loss.is_some() && a.instant_loss.is_some());
        assert!(a.failures.is_empty());
    }
}

#[test]
fn models_tolerate_a_changing_population() {
    let mut spec = EnvSpec::highway("mild");
    spec.controlled = Some(2);
    spec.behavior_vehicles = Some(20);
    let mut cfg = TrainConfig::new(spec, Algorithm::Iplan);
    let mut t = Trainer::new(cfg.clone()).unwrap();
    t.train_steps(90).unwrap();
    let models = t.models();
    for n in [5, 12, 40] {
        cfg.env.behavior_vehicles = Some(n);
        let eps = evaluate(&cfg, EvalPolicy::Greedy(&models), 1, 3, Parallelism::Sequential).unwrap();
        assert_eq!(eps[0].log.ticks[0].entities.len(), 2 + n);
    }
}

#[test]
fn behavioral_loss_descends_over_training() {
    let mut t = Trainer::new(nav(Algorithm::Iplan)).unwrap();
    let report = t.train_steps(50_000).unwrap();
    let losses: Vec<f64> = report
        .phases
        .iter()
        .filter_map(|p| {
            let ls: Vec<f64> = p.agents.iter().filter_map(|a| a.behavior_loss).collect();
            (!ls.is_empty()).then(|| ls.iter().sum::<f64>() / ls.len() as f64)
        })
        .collect();
    assert!(losses.len() > 20);
    let (first, last) = (median(&losses[..10]), median(&losses[losses.len() - 10..]));
    assert!(last < first, "first {first} last {last}");
    assert!(t.failures().is_empty());
}
