use std::collections::BTreeSet;

use iplan::config::{Algorithm, EnvSpec, TrainConfig};
use iplan::trainer::{Resource, Trainer};

const TRAINER_SRC: &str = include_str!("../src/trainer.rs");
const AGENT_SRC: &str = include_str!("../src/agent.rs");

/// Source text of the top-level function `name` in `src`.
fn function_body<'a>(src: &'a str, name: &str) -> &'a str {
    let start = src.find(&format!("pub fn {name}(")).unwrap_or_else(|| panic!("{name} not found"));
    let len = src[start..].find("\n}\n").expect("function end");
    &src[start..start + len]
}

#[test]
fn per_agent_phases_only_see_their_own_slot() {
    for (src, name) in [
        (TRAINER_SRC, "agent_gradient_phase"),
        (TRAINER_SRC, "agent_prepare"),
        (AGENT_SRC, "prepare"),
    ] {
        let body = function_body(src, name);
        for banned in ["agents", "Trainer", "self", "static", "Mutex", "RefCell", "Arc<"] {
            assert!(!body.contains(banned), "{name} mentions {banned}");
        }
    }
}

#[test]
fn no_global_mutable_state() {
    let sources = [
        TRAINER_SRC,
        AGENT_SRC,
        include_str!("../src/ppo.rs"),
        include_str!("../src/incentive/behavior.rs"),
        include_str!("../src/incentive/instant.rs"),
        include_str!("../src/numerics/params.rs"),
    ];
    for src in sources {
        for banned in ["static mut", "thread_local!", "OnceLock", "lazy_static"] {
            assert!(!src.contains(banned), "found {banned}");
        }
    }
}

#[test]
fn agents_never_share_parameter_stores() {
    for a in Algorithm::ALL {
        let t = Trainer::new(TrainConfig::new(EnvSpec::navigation("hard"), a)).unwrap();
        let tags: Vec<u64> = t.agents.iter().flat_map(|s| s.model.store_tags()).collect();
        let unique: BTreeSet<u64> = tags.iter().copied().collect();
        assert_eq!(unique.len(), tags.len(), "{a:?}");
    }
}

#[test]
fn training_run_reads_only_own_data() {
    let mut spec = EnvSpec::highway("chaotic");
    spec.controlled = Some(3);
    spec.behavior_vehicles = Some(12);
    let mut cfg = TrainConfig::new(spec, Algorithm::Iplan);
    cfg.ppo.buffer = 64;
    let mut t = Trainer::new(cfg).unwrap();
    t.train_steps(400).unwrap();
    assert!(t.audit.violations().is_empty(), "{:?}", t.audit.violations());
    for i in 0..3 {
        for r in [Resource::Reward, Resource::Action, Resource::Parameters, Resource::Experience] {
            assert!(t.audit.reads.contains_key(&(i, r, i)), "agent {i} never read its own {r:?}");
        }
    }
    let owners: BTreeSet<usize> = t.audit.reads.keys().filter(|k| k.1 != Resource::Observation).map(|k| k.2).collect();
    assert_eq!(owners, (0..3).collect());
}

#[test]
fn audit_flags_cross_agent_reads() {
    let mut t = Trainer::new(TrainConfig::new(EnvSpec::navigation("easy"), Algorithm::Iplan)).unwrap();
    t.audit.record(0, Resource::Reward, 1);
    let tag = t.agents[1].model.store_tags()[0];
    t.audit.updated_stores.entry(2).or_default().push(tag);
    t.audit.updated_stores.entry(1).or_default().push(tag);
    let v = t.audit.violations();
    assert_eq!(v.len(), 2, "{v:?}");
}
