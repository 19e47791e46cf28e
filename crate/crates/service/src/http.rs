//! HTTP API over the artifact store.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use brex_core::distill::DistillConfig;
use brex_core::env::{EnvConfig, Role};
use brex_core::eval::{AnnotationLabels, LabeledItem};
use brex_core::llm::ExplanationRecord;
use brex_core::policy::Behavior;
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::error::ApiError;
use crate::ops::{self, Backends, ExplainRequest};
use crate::store::{ArtifactStore, TreeArtifact};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Done { tree: ops::TreeSummary },
    Failed { error: ApiError },
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<ArtifactStore>,
    pub config: Arc<ServiceConfig>,
    pub backends: Backends,
    jobs: Arc<Mutex<HashMap<String, JobStatus>>>,
    next_job: Arc<AtomicU64>,
    in_flight: Arc<Mutex<HashSet<String>>>,
}

impl AppState {
    pub fn new(store: ArtifactStore, config: ServiceConfig, backends: Backends) -> Self {
        Self {
            store: Arc::new(store),
            config: Arc::new(config),
            backends,
            jobs: Arc::default(),
            next_job: Arc::default(),
            in_flight: Arc::default(),
        }
    }

    /// Claims `key` until the guard drops; Conflict if already claimed.
    fn claim(&self, key: String) -> Result<InFlight, ApiError> {
        let mut set = self.in_flight.lock().expect("in-flight set poisoned");
        if !set.insert(key.clone()) {
            return Err(ApiError::conflict(format!("a request for '{key}' is already in flight")));
        }
        Ok(InFlight {
            set: self.in_flight.clone(),
            key,
        })
    }
}

struct InFlight {
    set: Arc<Mutex<HashSet<String>>>,
    key: String,
}

impl Drop for InFlight {
    fn drop(&mut self) {
        if let Ok(mut s) = self.set.lock() {
            s.remove(&self.key);
        }
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::backend(format!("worker failed: {e}")))?
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/episodes", post(create_episode).get(list_episodes))
        .route("/episodes/{id}", get(get_episode))
        .route("/episodes/{id}/steps/{t}", get(get_step))
        .route("/trees", post(create_tree).get(list_trees))
        .route("/trees/{id}", get(get_tree))
        .route("/jobs/{id}", get(get_job))
        .route("/explanations", post(create_explanation).get(list_explanations))
        .route("/explanations/{id}", get(get_explanation))
        .route("/explanations/{id}/chat", post(chat))
        .route("/explanations/{id}/labels", post(post_labels).get(get_labels))
        .route("/labels", post(import_labels))
        .route("/reports/accuracy", get(report_accuracy))
        .route("/reports/hallucination", get(report_hallucination))
        .route("/reports/fidelity", get(report_fidelity))
        .with_state(state)
}

#[derive(Debug, Deserialize)]
struct EpisodeBody {
    behavior: Behavior,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    env: Option<EnvConfig>,
}

async fn create_episode(State(s): State<AppState>, Json(body): Json<EpisodeBody>) -> ApiResult<ops::EpisodeSummary> {
    let mut env = body.env.unwrap_or(s.config.env);
    if let Some(seed) = body.seed {
        env.seed = seed;
    }
    blocking(move || ops::create_episode(&s.store, body.behavior, env)).await.map(Json)
}

async fn list_episodes(State(s): State<AppState>) -> ApiResult<Vec<ops::EpisodeSummary>> {
    blocking(move || ops::list_episodes(&s.store)).await.map(Json)
}

#[derive(Debug, Serialize)]
struct EpisodeView {
    id: String,
    header: crate::store::EpisodeHeader,
    trajectory: brex_core::rollout::Trajectory,
}

async fn get_episode(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<EpisodeView> {
    blocking(move || {
        let (header, trajectory) = s.store.get_episode(&id)?;
        Ok(EpisodeView { id, header, trajectory })
    })
    .await
    .map(Json)
}

async fn get_step(State(s): State<AppState>, Path((id, t)): Path<(String, usize)>) -> ApiResult<ops::StepView> {
    blocking(move || ops::episode_step(&s.store, &id, t)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct TreeBody {
    behavior: Behavior,
    role: Role,
    /// Replaces the configured distillation settings; its `env` is used as given.
    #[serde(default)]
    config: Option<DistillConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JobRef {
    pub job: String,
}

async fn create_tree(State(s): State<AppState>, Json(body): Json<TreeBody>) -> Result<(StatusCode, Json<JobRef>), ApiError> {
    let mut cfg = (*s.config).clone();
    if let Some(d) = body.config {
        cfg.env = d.env;
        cfg.distill = d;
    }
    cfg.validate()?;
    let job = format!("job-{}", s.next_job.fetch_add(1, Ordering::Relaxed) + 1);
    s.jobs.lock().expect("job table poisoned").insert(job.clone(), JobStatus::Running);
    let (jobs, store, key) = (s.jobs.clone(), s.store.clone(), job.clone());
    tokio::task::spawn_blocking(move || {
        let status = match ops::distill_tree(&store, &cfg, body.behavior, body.role) {
            Ok(tree) => JobStatus::Done { tree },
            Err(error) => JobStatus::Failed { error },
        };
        jobs.lock().expect("job table poisoned").insert(key, status);
    });
    Ok((StatusCode::ACCEPTED, Json(JobRef { job })))
}

async fn get_job(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<JobStatus> {
    let jobs = s.jobs.lock().expect("job table poisoned");
    jobs.get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("job '{id}' not found")))
}

async fn list_trees(State(s): State<AppState>) -> ApiResult<Vec<ops::TreeSummary>> {
    blocking(move || ops::list_trees(&s.store)).await.map(Json)
}

async fn get_tree(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<TreeArtifact> {
    blocking(move || Ok(s.store.get_tree(&id)?)).await.map(Json)
}

async fn create_explanation(
    State(s): State<AppState>,
    Json(req): Json<ExplainRequest>,
) -> Result<(StatusCode, Json<ExplanationRecord>), ApiError> {
    let st = s.clone();
    let r = req.clone();
    let id = blocking(move || ops::explanation_id(&st.store, &st.config, &r)).await?;
    let _guard = s.claim(id)?;
    let (rec, created) = blocking(move || ops::explain(&s.store, &s.config, &s.backends, &req)).await?;
    let code = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((code, Json(rec)))
}

async fn list_explanations(State(s): State<AppState>) -> ApiResult<Vec<ops::RecordSummary>> {
    blocking(move || ops::list_records(&s.store)).await.map(Json)
}

async fn get_explanation(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<ExplanationRecord> {
    blocking(move || Ok(s.store.get_record(&id)?)).await.map(Json)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatBody {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatReply {
    pub id: String,
    pub reply: String,
    pub session: brex_core::llm::ChatSession,
}

async fn chat(State(s): State<AppState>, Path(id): Path<String>, Json(body): Json<ChatBody>) -> ApiResult<ChatReply> {
    let _guard = s.claim(id.clone())?;
    blocking(move || {
        let (reply, rec) = ops::chat(&s.store, &s.backends, &id, &body.text)?;
        Ok(ChatReply {
            id,
            reply,
            session: rec.session,
        })
    })
    .await
    .map(Json)
}

async fn post_labels(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(labels): Json<AnnotationLabels>,
) -> ApiResult<LabeledItem> {
    blocking(move || ops::attach_labels(&s.store, &id, labels)).await.map(Json)
}

async fn get_labels(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<LabeledItem> {
    blocking(move || {
        s.store.get_record(&id)?;
        Ok(s.store.get_labels(&id)?)
    })
    .await
    .map(Json)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Imported {
    pub imported: usize,
}

async fn import_labels(State(s): State<AppState>, Json(items): Json<Vec<LabeledItem>>) -> ApiResult<Imported> {
    blocking(move || ops::import_labels(&s.store, &items).map(|imported| Imported { imported }))
        .await
        .map(Json)
}

async fn report_accuracy(State(s): State<AppState>) -> ApiResult<ops::AccuracyPayload> {
    blocking(move || ops::accuracy_report(&s.store)).await.map(Json)
}

async fn report_hallucination(State(s): State<AppState>) -> ApiResult<ops::HallucinationPayload> {
    blocking(move || ops::hallucination_report(&s.store)).await.map(Json)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FidelityPayload {
    pub table: String,
}

async fn report_fidelity(State(s): State<AppState>) -> ApiResult<FidelityPayload> {
    blocking(move || ops::fidelity_table(&s.store).map(|table| FidelityPayload { table }))
        .await
        .map(Json)
}

pub async fn serve(state: AppState, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
