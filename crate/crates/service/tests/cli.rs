use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use brex_core::env::Role;
use brex_core::features::encode_features;
use brex_service::store::ArtifactStore;

struct Env {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Env {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("brex.toml");
        std::fs::write(
            &config,
            format!("fidelity_episodes = 50\n[distill]\niterations = 2\nepisodes_per_iteration = 40\nholdout_episodes = 20\n{extra}"),
        )
        .unwrap();
        Self { dir, config }
    }

    fn store(&self) -> PathBuf {
        self.dir.path().join("store")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_brex"))
            .arg("--store")
            .arg(self.store())
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .env_remove("BREX_LLM_ENDPOINT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap().to_string()
}

fn step_where(store: &Path, episode: &str, tree: &str, role: Role, agree: bool) -> usize {
    let store = ArtifactStore::open(store).unwrap();
    let (_, traj) = store.get_episode(episode).unwrap();
    let art = store.get_tree(tree).unwrap();
    traj.steps
        .iter()
        .position(|s| (art.tree.predict(&encode_features(&s.observation)).unwrap() == s.action(role)) == agree)
        .expect("no matching step")
}

fn is_id(s: &str) -> bool {
    s.len() == 16 && s.bytes().all(|b| b.is_ascii_hexdigit())
}

#[test]
fn rollout_prints_stable_ids() {
    let env = Env::new("");
    let a = env.ok(&["rollout", "--behavior", "fixed", "--seed", "1"]);
    assert!(is_id(a.trim()), "{a}");
    assert_eq!(a, env.ok(&["rollout", "--behavior", "fixed", "--seed", "1"]));
    let many = env.ok(&["rollout", "--behavior", "explore", "--seed", "1", "--episodes", "3"]);
    assert_eq!(many.lines().count(), 3);
    assert!(many.lines().all(is_id));
}

#[test]
fn distill_then_report_shows_full_fixed_fidelity() {
    let env = Env::new("");
    let out = env.ok(&["distill", "--behavior", "fixed", "--role", "engineer"]);
    assert!(is_id(&first_line(&out)));
    assert!(out.contains("fidelity 1.0000"), "{out}");
    let report = env.ok(&["report"]);
    let row = report.lines().find(|l| l.starts_with("Fixed")).unwrap();
    assert!(row.contains("engineer") && row.ends_with("1.0000"), "{report}");
}

#[test]
fn explain_chat_and_eval_offline() {
    let env = Env::new("");
    let tree = first_line(&env.ok(&["distill", "--behavior", "fixed", "--role", "medic"]));
    env.ok(&["distill", "--behavior", "fixed", "--role", "engineer"]);
    let ep = env.ok(&["rollout", "--behavior", "fixed", "--seed", "3"]).trim().to_string();
    let t = step_where(&env.store(), &ep, &tree, Role::Medic, true).to_string();

    let out = env.ok(&["explain", "--trajectory", &ep, "--t", &t, "--role", "medic", "--br", "states"]);
    let id = first_line(&out);
    assert!(is_id(&id));
    assert!(out.contains("\nPrediction:\nANSWER: medic "), "{out}");
    // same request, same record
    assert_eq!(
        id,
        first_line(&env.ok(&["explain", "--trajectory", &ep, "--t", &t, "--role", "medic", "--br", "states"]))
    );

    let reply = env.ok(&["chat", "--record", &id, "--message", "Why not stay?"]);
    assert!(!reply.trim().is_empty());
    let rec = ArtifactStore::open(env.store()).unwrap().get_record(&id).unwrap();
    assert_eq!(rec.session.len(), 7);

    let ids = env.ok(&["eval", "--behavior", "fixed", "--n", "2", "--seed", "9"]);
    assert_eq!(ids.lines().count(), 2 * 2 * 3);
    let store = ArtifactStore::open(env.store()).unwrap();
    for id in ids.lines() {
        let r = store.get_record(id).unwrap();
        assert!(r.gated && r.tree_action == r.action);
        assert!(matches!(r.prediction, Some(brex_core::llm::PredictionOutcome::Parsed { .. })));
    }
    let bad = env.run(&["eval", "--behavior", "fixed", "--category", "ambiguous", "--n", "1"]);
    assert!(!bad.status.success());
}

#[test]
fn explain_on_ungated_state_fails() {
    let env = Env::new("max_depth = 1\n");
    let tree = first_line(&env.ok(&["distill", "--behavior", "explore", "--role", "engineer"]));
    let ep = env.ok(&["rollout", "--behavior", "explore", "--seed", "4"]).trim().to_string();
    let t = step_where(&env.store(), &ep, &tree, Role::Engineer, false).to_string();
    let out = env.run(&["explain", "--trajectory", &ep, "--t", &t, "--role", "engineer", "--br", "path"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[gated]"), "{err}");
    assert!(ArtifactStore::open(env.store())
        .unwrap()
        .ids(brex_service::store::Kind::Explanation)
        .unwrap()
        .is_empty());
}

#[test]
fn live_explain_without_endpoint_fails() {
    let env = Env::new("");
    let tree = first_line(&env.ok(&["distill", "--behavior", "fixed", "--role", "medic"]));
    let ep = env.ok(&["rollout", "--behavior", "fixed", "--seed", "2"]).trim().to_string();
    let t = step_where(&env.store(), &ep, &tree, Role::Medic, true).to_string();
    let out = env.run(&["explain", "--trajectory", &ep, "--t", &t, "--role", "medic", "--live"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[backend_unavailable]"));
}

#[test]
fn label_import_feeds_report() {
    let env = Env::new("");
    let core = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests");
    let out = env.ok(&["labels", "import", core.join("fixtures/labels.jsonl").to_str().unwrap()]);
    assert_eq!(out.trim(), "imported 420 labeled items");
    let report = env.ok(&["report"]);
    let golden = std::fs::read_to_string(core.join("golden/accuracy_report.txt")).unwrap();
    assert!(report.contains(&golden), "{report}");
    assert!(report.contains("Pearson r = "));
}

#[test]
fn usage_errors() {
    let env = Env::new("");
    assert!(!env.run(&["rollout", "--behavior", "wander"]).status.success());
    assert!(!env.run(&["explain", "--trajectory", "0123456789abcdef", "--t", "0", "--role", "medic"]).status.success());
    std::fs::write(&env.config, "unknown_key = 1\n").unwrap();
    let out = env.run(&["report"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[invalid]"));
}
