use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use brex_core::distill::DistillConfig;
use brex_core::env::Role;
use brex_core::features::encode_features;
use brex_core::llm::{BackendError, BackendMetadata, ChatMessage, LlmBackend, MockBackend};
use brex_core::policy::Behavior;
use brex_service::config::ServiceConfig;
use brex_service::http::{router, AppState};
use brex_service::ops::Backends;
use brex_service::store::{ArtifactStore, TreeArtifact};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn small_config() -> ServiceConfig {
    ServiceConfig {
        distill: DistillConfig {
            iterations: 2,
            episodes_per_iteration: 40,
            holdout_episodes: 20,
            ..DistillConfig::default()
        },
        fidelity_episodes: 50,
        ..ServiceConfig::default()
    }
}

fn app_with(dir: &Path, cfg: ServiceConfig, backends: Backends) -> Router {
    router(AppState::new(ArtifactStore::open(dir).unwrap(), cfg, backends))
}

fn app(dir: &Path) -> Router {
    app_with(dir, small_config(), Backends::offline())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, v)
}

async fn distill(app: &Router, body: Value) -> Value {
    let (status, job) = call(app, "POST", "/trees", Some(body)).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{job}");
    let uri = format!("/jobs/{}", job["job"].as_str().unwrap());
    for _ in 0..600 {
        let (status, v) = call(app, "GET", &uri, None).await;
        assert_eq!(status, StatusCode::OK);
        match v["status"].as_str().unwrap() {
            "running" => tokio::time::sleep(Duration::from_millis(50)).await,
            "done" => return v["tree"].clone(),
            _ => panic!("job failed: {v}"),
        }
    }
    panic!("distillation job did not finish");
}

async fn episode(app: &Router, behavior: &str, seed: u64) -> String {
    let (status, v) = call(app, "POST", "/episodes", Some(json!({"behavior": behavior, "seed": seed}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    v["id"].as_str().unwrap().to_string()
}

/// First timestep where the tree does (or does not) agree with the expert.
fn find_step(dir: &Path, episode: &str, tree: &str, role: Role, agree: bool) -> Option<usize> {
    let store = ArtifactStore::open(dir).unwrap();
    let (_, traj) = store.get_episode(episode).unwrap();
    let art: TreeArtifact = store.get_tree(tree).unwrap();
    traj.steps
        .iter()
        .position(|s| (art.tree.predict(&encode_features(&s.observation)).unwrap() == s.action(role)) == agree)
}

#[tokio::test(flavor = "multi_thread")]
async fn episodes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = episode(&app, "fixed", 1).await;
    assert_eq!(id, episode(&app, "fixed", 1).await);
    assert_ne!(id, episode(&app, "fixed", 2).await);

    let (status, v) = call(&app, "GET", &format!("/episodes/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["header"]["behavior"], "fixed");
    let n = v["trajectory"]["steps"].as_array().unwrap().len();

    let (status, step) = call(&app, "GET", &format!("/episodes/{id}/steps/3"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(step["t"], 3);
    assert_eq!(step["features"].as_str().unwrap().len(), 100);
    assert!(step["observation_text"].as_str().unwrap().starts_with("medic is in room"));

    let (status, err) = call(&app, "GET", &format!("/episodes/{id}/steps/{n}"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "invalid");

    let (status, list) = call(&app, "GET", "/episodes", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(list.as_array().unwrap().len(), 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (status, v) = call(&app, "GET", "/trees/0123456789abcdef", None).await;
    assert_eq!((status, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
    let (status, v) = call(&app, "GET", "/jobs/job-99", None).await;
    assert_eq!((status, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
    let (status, v) = call(&app, "GET", "/explanations/nothex", None).await;
    assert_eq!((status, v["code"].as_str()), (StatusCode::BAD_REQUEST, Some("invalid")));

    // no tree distilled yet
    let ep = episode(&app, "explore", 3).await;
    let body = json!({"episode": ep, "t": 0, "role": "medic", "br_kind": "path"});
    let (status, v) = call(&app, "POST", "/explanations", Some(body)).await;
    assert_eq!((status, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")), "{v}");

    let (status, _) = call(&app, "POST", "/trees", Some(json!({"behavior": "fixed", "role": "pilot"}))).await;
    assert!(status.is_client_error());
}

#[tokio::test(flavor = "multi_thread")]
async fn fixed_tree_job_reaches_full_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let tree = distill(&app, json!({"behavior": "fixed", "role": "engineer"})).await;
    assert_eq!(tree["fidelity"]["accuracy"], 1.0);
    assert_eq!(tree["current"], true);
    let id = tree["id"].as_str().unwrap();
    let (status, art) = call(&app, "GET", &format!("/trees/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(art["role"], "engineer");
    let (_, fid) = call(&app, "GET", "/reports/fidelity", None).await;
    let table = fid["table"].as_str().unwrap();
    let row = table.lines().find(|l| l.starts_with("Fixed")).unwrap();
    assert!(row.contains("engineer") && row.ends_with("1.0000"), "{table}");
}

#[tokio::test(flavor = "multi_thread")]
async fn explanation_lifecycle_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let tree = distill(&app, json!({"behavior": "fixed", "role": "medic"})).await;
    let ep = episode(&app, "fixed", 5).await;
    let t = find_step(dir.path(), &ep, tree["id"].as_str().unwrap(), Role::Medic, true).unwrap();

    let body = json!({"episode": ep, "t": t, "role": "medic", "br_kind": "path"});
    let (status, rec) = call(&app, "POST", "/explanations", Some(body.clone())).await;
    assert_eq!(status, StatusCode::CREATED, "{rec}");
    assert!(!rec["explanation_text"].as_str().unwrap().is_empty());
    assert_eq!(rec["prediction"]["status"], "parsed");
    assert_eq!(rec["gated"], true);
    assert_eq!(rec["session"]["messages"].as_array().unwrap().len(), 5);
    let id = rec["id"].as_str().unwrap().to_string();

    // identical request returns the stored record
    let (status, again) = call(&app, "POST", "/explanations", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again, rec);

    // other representations get their own records
    for kind in ["states", "none"] {
        let (status, other) =
            call(&app, "POST", "/explanations", Some(json!({"episode": ep, "t": t, "role": "medic", "br_kind": kind}))).await;
        assert_eq!(status, StatusCode::CREATED);
        assert_eq!(other["br_kind"], kind);
        assert_ne!(other["id"], rec["id"]);
    }

    let (status, reply) =
        call(&app, "POST", &format!("/explanations/{id}/chat"), Some(json!({"text": "What if the room had rubble?"}))).await;
    assert_eq!(status, StatusCode::OK, "{reply}");
    assert_eq!(reply["session"]["messages"].as_array().unwrap().len(), 7);
    let (status, _) = call(&app, "POST", &format!("/explanations/{id}/chat"), Some(json!({"text": "  "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let labels = json!({"annotator_id": "a1", "strategy": true, "action": false, "hallucination_in_explanation": false});
    let (status, item) = call(&app, "POST", &format!("/explanations/{id}/labels"), Some(labels)).await;
    assert_eq!(status, StatusCode::OK, "{item}");
    assert_eq!(item["record_id"], id.as_str());
    assert_eq!(item["behavior"], "fixed");
    let wrong = json!({"record_id": "other", "annotator_id": "a1"});
    let (status, _) = call(&app, "POST", &format!("/explanations/{id}/labels"), Some(wrong)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    // resubmission replaces
    let labels = json!({"annotator_id": "a1", "strategy": true, "action": true});
    call(&app, "POST", &format!("/explanations/{id}/labels"), Some(labels)).await;
    let (_, acc) = call(&app, "GET", "/reports/accuracy", None).await;
    let cells = acc["report"]["cells"].as_array().unwrap();
    assert!(cells.iter().all(|c| c["denominator"] == 1));
    assert!(cells.iter().any(|c| c["metric"] == "action" && c["numerator"] == 1));

    let before = snapshot(&app, &id).await;
    let after = snapshot(&self::app(dir.path()), &id).await;
    assert_eq!(before, after);
}

async fn snapshot(app: &Router, id: &str) -> Vec<Value> {
    let mut out = Vec::new();
    for uri in [
        "/episodes".to_string(),
        "/trees".to_string(),
        "/explanations".to_string(),
        format!("/explanations/{id}"),
        format!("/explanations/{id}/labels"),
        "/reports/accuracy".to_string(),
        "/reports/hallucination".to_string(),
        "/reports/fidelity".to_string(),
    ] {
        let (status, v) = call(app, "GET", &uri, None).await;
        assert_eq!(status, StatusCode::OK, "{uri}: {v}");
        out.push(v);
    }
    out
}

#[tokio::test(flavor = "multi_thread")]
async fn ungated_state_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig {
        distill: DistillConfig {
            max_depth: 1,
            ..small_config().distill
        },
        ..small_config()
    };
    let app = app_with(dir.path(), cfg, Backends::offline());
    let tree = distill(&app, json!({"behavior": "explore", "role": "engineer"})).await;
    let ep = episode(&app, "explore", 8).await;
    let t = find_step(dir.path(), &ep, tree["id"].as_str().unwrap(), Role::Engineer, false).unwrap();
    let body = json!({"episode": ep, "t": t, "role": "engineer", "br_kind": "path"});
    let (status, v) = call(&app, "POST", "/explanations", Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "gated");
    let (_, list) = call(&app, "GET", "/explanations", None).await;
    assert!(list.as_array().unwrap().is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn live_requests_without_endpoint_are_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let tree = distill(&app, json!({"behavior": "fixed", "role": "medic"})).await;
    let ep = episode(&app, "fixed", 2).await;
    let t = find_step(dir.path(), &ep, tree["id"].as_str().unwrap(), Role::Medic, true).unwrap();
    let body = json!({"episode": ep, "t": t, "role": "medic", "br_kind": "none", "live": true});
    let (status, v) = call(&app, "POST", "/explanations", Some(body)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["code"], "backend_unavailable");
}

struct Failing;

impl LlmBackend for Failing {
    fn complete(&self, _: &[ChatMessage]) -> Result<String, BackendError> {
        Err(BackendError {
            message: "connection refused".into(),
            attempts: 2,
            retriable: true,
        })
    }

    fn metadata(&self) -> BackendMetadata {
        BackendMetadata {
            model: "mock".into(),
            temperature: 0.0,
        }
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn backend_failure_stores_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let backends = Backends {
        mock: Arc::new(Failing),
        live: None,
    };
    let app = app_with(dir.path(), small_config(), backends);
    let tree = distill(&app, json!({"behavior": "fixed", "role": "engineer"})).await;
    let ep = episode(&app, "fixed", 4).await;
    let t = find_step(dir.path(), &ep, tree["id"].as_str().unwrap(), Role::Engineer, true).unwrap();
    let body = json!({"episode": ep, "t": t, "role": "engineer", "br_kind": "path"});
    let (status, v) = call(&app, "POST", "/explanations", Some(body)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["code"], "backend_unavailable");
    let (_, list) = call(&app, "GET", "/explanations", None).await;
    assert!(list.as_array().unwrap().is_empty());
}

/// Mock replies after a delay so two turns overlap.
struct Slow(MockBackend);

impl LlmBackend for Slow {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        std::thread::sleep(Duration::from_millis(400));
        self.0.complete(messages)
    }

    fn metadata(&self) -> BackendMetadata {
        self.0.metadata()
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_chat_turns_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let backends = Backends {
        mock: Arc::new(Slow(MockBackend::new())),
        live: None,
    };
    let app = app_with(dir.path(), small_config(), backends);
    let tree = distill(&app, json!({"behavior": "fixed", "role": "engineer"})).await;
    let ep = episode(&app, "fixed", 6).await;
    let t = find_step(dir.path(), &ep, tree["id"].as_str().unwrap(), Role::Engineer, true).unwrap();
    let body = json!({"episode": ep, "t": t, "role": "engineer", "br_kind": "path"});
    let (status, rec) = call(&app, "POST", "/explanations", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED);
    let uri = format!("/explanations/{}/chat", rec["id"].as_str().unwrap());

    let first = call(&app, "POST", &uri, Some(json!({"text": "Why not go north?"})));
    let second = async {
        tokio::time::sleep(Duration::from_millis(100)).await;
        call(&app, "POST", &uri, Some(json!({"text": "And south?"}))).await
    };
    let ((s1, v1), (s2, v2)) = tokio::join!(first, second);
    assert_eq!(s1, StatusCode::OK, "{v1}");
    assert_eq!(s2, StatusCode::CONFLICT);
    assert_eq!(v2["code"], "conflict");

    // the session holds exactly one extra turn and accepts the next one
    let (status, v) = call(&app, "POST", &uri, Some(json!({"text": "And south?"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["session"]["messages"].as_array().unwrap().len(), 9);
}

#[tokio::test(flavor = "multi_thread")]
async fn golden_labels_reproduce_report_tables() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let core = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests");
    let items: Vec<Value> = std::fs::read_to_string(core.join("fixtures/labels.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let (status, v) = call(&app, "POST", "/labels", Some(Value::Array(items.clone()))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["imported"], items.len());

    let (_, acc) = call(&app, "GET", "/reports/accuracy", None).await;
    let golden = std::fs::read_to_string(core.join("golden/accuracy_report.txt")).unwrap();
    assert_eq!(acc["table"].as_str().unwrap(), golden);
    let (_, hal) = call(&app, "GET", "/reports/hallucination", None).await;
    let golden = std::fs::read_to_string(core.join("golden/hallucination_table.txt")).unwrap();
    assert_eq!(hal["table"].as_str().unwrap(), golden);
    assert!(hal["correlation"]["r"].as_f64().unwrap().abs() <= 1.0);

    // restart: same payloads
    let (_, acc2) = call(&self::app(dir.path()), "GET", "/reports/accuracy", None).await;
    assert_eq!(acc, acc2);

    let bad = json!([{"behavior": "fixed", "br_kind": "path", "state_category": null, "record_id": "", "annotator_id": "a"}]);
    let (status, _) = call(&app, "POST", "/labels", Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[test]
fn behavior_names_parse() {
    for b in Behavior::ALL {
        assert_eq!(b.name().parse::<Behavior>().unwrap(), b);
    }
}
