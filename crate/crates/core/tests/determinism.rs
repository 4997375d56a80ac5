use std::collections::BTreeMap;

use iplan::config::{Algorithm, EnvSpec, TrainConfig};
use iplan::metrics::{MetricRow, MetricTable};
use iplan::parallel::Parallelism;
use iplan::trainer::{evaluate, EvalPolicy, RunManifest, Trainer};

struct Artifacts {
    logs: Vec<String>,
    checkpoint: Vec<u8>,
    metrics: String,
}

fn run(cfg: TrainConfig, steps: usize) -> Artifacts {
    let mut t = Trainer::new(cfg).unwrap();
    let mut logs = Vec::new();
    for _ in 0..steps / 500 {
        t.train_steps(500).unwrap();
        let mut buf = Vec::new();
        t.last_log().unwrap().write_jsonl(&mut buf).unwrap();
        logs.push(String::from_utf8(buf).unwrap());
    }
    let mut checkpoint = Vec::new();
    t.checkpoint().write_to(&mut checkpoint).unwrap();
    let models = t.models();
    let eps = evaluate(&t.config, EvalPolicy::Greedy(&models), 6, 11, t.config.parallelism).unwrap();
    let outcomes: Vec<_> = eps.into_iter().map(|e| e.outcome).collect();
    let row = MetricRow::from_outcomes("iplan", "easy", &outcomes, false, 0.95).unwrap();
    Artifacts {
        logs,
        checkpoint,
        metrics: MetricTable { rows: vec![row] }.to_csv(),
    }
}

fn body(logs: &[String]) -> Vec<&str> {
    logs.iter().map(|l| l.split_once('\n').unwrap().1).collect()
}

fn assert_same(a: &Artifacts, b: &Artifacts) {
    assert!(body(&a.logs) == body(&b.logs), "episode logs differ");
    assert!(a.checkpoint == b.checkpoint, "checkpoints differ");
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn manifest_reproduces_the_run() {
    let mut cfg = TrainConfig::new(EnvSpec::navigation("easy"), Algorithm::Iplan);
    cfg.seed = 42;
    let first = Trainer::new(cfg.clone()).unwrap();
    let manifest = RunManifest::new(&first, BTreeMap::new());
    let json = serde_json::to_string(&manifest).unwrap();
    let back: RunManifest = serde_json::from_str(&json).unwrap();
    assert_eq!(back, manifest);
    let a = run(cfg, 3000);
    let b = run(back.config, 3000);
    assert_same(&a, &b);
    assert!(a.logs == b.logs, "log headers differ");
}

/// Headers carry the config hash, which covers the parallelism switch.
#[test]
fn parallel_and_sequential_paths_agree() {
    let mut cfg = TrainConfig::new(EnvSpec::navigation("easy"), Algorithm::Iplan);
    cfg.seed = 5;
    cfg.parallelism = Parallelism::Sequential;
    let a = run(cfg.clone(), 1000);
    cfg.parallelism = Parallelism::Rayon;
    let b = run(cfg, 1000);
    assert_same(&a, &b);
}

#[test]
fn different_seeds_differ() {
    let mut cfg = TrainConfig::new(EnvSpec::navigation("easy"), Algorithm::Ippo);
    let a = run(cfg.clone(), 500);
    cfg.seed = 1;
    let b = run(cfg, 500);
    assert_ne!(a.logs, b.logs);
    assert!(a.checkpoint != b.checkpoint);
}
