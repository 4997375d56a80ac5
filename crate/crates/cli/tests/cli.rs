use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iplan::config::{Algorithm, EnvSpec, TrainConfig};
use iplan::metrics::METRIC_CSV_HEADER;
use iplan::trainer::RunManifest;
use iplan_cli::report::REPORT_CSV_HEADER;
use iplan_cli::{CURVE_CSV_HEADER, EPISODES_CSV_HEADER, STATS_CSV_HEADER};

fn iplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iplan")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path, algorithm: Algorithm) -> PathBuf {
    let mut cfg = TrainConfig::new(EnvSpec::navigation("easy"), algorithm);
    cfg.total_steps = 600;
    cfg.eval_every = 300;
    cfg.checkpoint_every = 300;
    cfg.eval_episodes = 3;
    let path = dir.join(format!("{}.toml", algorithm.name()));
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the small config into `dir/run-<algorithm>`.
fn trained(dir: &Path, algorithm: Algorithm) -> PathBuf {
    let cfg = small_config(dir, algorithm);
    let run = dir.join(format!("run-{}", algorithm.name()));
    let o = iplan(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    run
}

#[test]
fn train_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained(tmp.path(), Algorithm::Iplan);
    for f in ["config.toml", "manifest.json", "stats.csv", "episodes.csv", "eval.csv", "checkpoint.ckpt", "episode.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(run.join("checkpoints/step-000000300.ckpt").exists());
    let stats = fs::read_to_string(run.join("stats.csv")).unwrap();
    assert!(stats.starts_with(&format!("# train-stats v1\n{STATS_CSV_HEADER}\n")));
    assert_eq!(stats.lines().count(), 2 + 2 * 3);
    let eps = fs::read_to_string(run.join("episodes.csv")).unwrap();
    assert!(eps.starts_with(&format!("# train-episodes v1\n{EPISODES_CSV_HEADER}\n")));
    assert_eq!(eps.lines().count(), 2 + 12 * 3);
    let curve = fs::read_to_string(run.join("eval.csv")).unwrap();
    assert!(curve.starts_with(&format!("# reward-curve v1\n{CURVE_CSV_HEADER}\n")));
    assert_eq!(curve.lines().count(), 4);
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.modules, vec![vec!["behavior".to_string(), "instant".to_string()]; 3]);
}

#[test]
fn ippo_manifest_lists_no_modules() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained(tmp.path(), Algorithm::Ippo);
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.modules.iter().all(Vec::is_empty));
}

#[test]
fn eval_is_byte_deterministic_and_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained(tmp.path(), Algorithm::Iplan);
    let ck = run.join("checkpoint.ckpt");
    let a = iplan(&["eval", "--checkpoint", s(&ck), "--episodes", "4"]);
    let b = iplan(&["eval", "--checkpoint", s(&ck), "--episodes", "4"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let csv = stdout(&a);
    assert!(csv.starts_with(&format!("# metric-table v1\n{METRIC_CSV_HEADER}\niplan,easy,4,")));

    let out = tmp.path().join("eval");
    assert_eq!(code(&iplan(&["eval", "--checkpoint", s(&ck), "--episodes", "4", "--out", s(&out)])), 0);
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap(), csv);
    let log = out.join("logs/episode-0003.jsonl");
    let r = iplan(&["replay", s(&log), s(&run.join("episode.jsonl"))]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(stdout(&r).contains("50 ticks verified"));

    let tampered = tmp.path().join("tampered.jsonl");
    let text = fs::read_to_string(&log).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[5]).unwrap();
    rec["rewards"][0] = serde_json::json!(12345.0);
    lines[5] = rec.to_string();
    fs::write(&tampered, lines.join("\n") + "\n").unwrap();
    assert_eq!(code(&iplan(&["replay", s(&tampered)])), 6);
}

#[test]
fn random_baseline_needs_no_checkpoint() {
    let o = iplan(&["eval", "--random", "--scenario", "mild", "--episodes", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = stdout(&o);
    let row = csv.lines().nth(2).unwrap();
    assert!(row.starts_with("random,mild,2,"));
    assert!(!row.contains(",,"), "speed is defined on the highway: {row}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&iplan(&["train", "--bogus"])), 2);
    assert_eq!(code(&iplan(&["eval", "--random", "--algo", "nope"])), 2);
    assert_eq!(code(&iplan(&["eval", "--random", "--scenario", "nowhere"])), 3);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "k_samples = \"four\"\n").unwrap();
    assert_eq!(code(&iplan(&["eval", "--random", "--config", s(&bad)])), 3);

    let run = trained(tmp.path(), Algorithm::Iplan);
    let ck = run.join("checkpoint.ckpt");
    assert_eq!(code(&iplan(&["eval", "--checkpoint", s(&ck), "--algo", "ippo", "--episodes", "2"])), 4);
    let old = tmp.path().join("old.ckpt");
    let text = fs::read_to_string(&ck).unwrap();
    fs::write(&old, text.replacen("iplan-checkpoint 1", "iplan-checkpoint 9", 1)).unwrap();
    assert_eq!(code(&iplan(&["eval", "--checkpoint", s(&old), "--config", s(&run.join("config.toml"))])), 4);
    assert_eq!(code(&iplan(&["eval", "--checkpoint", s(&tmp.path().join("missing.ckpt"))])), 1);
}

#[test]
fn manifest_is_accepted_as_config() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained(tmp.path(), Algorithm::Iplan);
    let ck = run.join("checkpoint.ckpt");
    let via_toml = iplan(&["eval", "--checkpoint", s(&ck), "--episodes", "2"]);
    let via_manifest = iplan(&["eval", "--checkpoint", s(&ck), "--episodes", "2", "--config", s(&run.join("manifest.json"))]);
    assert_eq!(code(&via_manifest), 0);
    assert_eq!(via_toml.stdout, via_manifest.stdout);
}

#[test]
fn report_collects_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let a = trained(tmp.path(), Algorithm::Iplan);
    let b = trained(tmp.path(), Algorithm::Ippo);
    let csv = tmp.path().join("report.csv");
    let svg = tmp.path().join("report.svg");
    let o = iplan(&["report", s(&a), s(&b), "--out", s(&csv), "--plot", s(&svg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("# reward-report v1\n"));
    assert!(text.lines().nth(1).unwrap().starts_with(REPORT_CSV_HEADER));
    assert_eq!(text.lines().count(), 2 + 4);
    assert!(fs::read_to_string(&svg).unwrap().contains("<polyline"));
}

#[test]
fn selftest_passes() {
    let o = iplan(&["selftest", "--cases", "50"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
}
