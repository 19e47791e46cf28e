//! Operations shared by the CLI and the HTTP handlers. All of them block.

use std::sync::Arc;

use brex_core::distill::{dagger_distill, eval_fidelity_counts};
use brex_core::env::{derive_seed, EnvConfig, Role};
use brex_core::eval::{
    categorize_state, hallucination_action_correlation, sample_eval_states, AccuracyReport, AnnotationLabels,
    CellKey, EvalError, HallucinationReport, LabeledItem, PearsonResult, SampleRequest, StateCategory, TreePair,
};
use brex_core::features::encode_features;
use brex_core::llm::{
    follow_up, request_action_prediction, request_explanation, ExplainInput, ExplanationRecord, HttpBackend,
    HttpConfig, LlmBackend, MockBackend, StateOrigin,
};
use brex_core::policy::Behavior;
use brex_core::repr::{extract_path, render_observation, sample_indices, sample_states_br, BehaviorRepresentation, BrKind};
use brex_core::rollout::{rollout, Trajectory};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::error::ApiError;
use crate::store::{content_id, ArtifactStore, EpisodeHeader, FidelitySummary, Kind, TreeArtifact, STORE_SCHEMA_VERSION};

const FIDELITY_STREAM: u64 = 0x4644;
const FIXED_SAMPLE_STREAM: u64 = 0x4658;
const MOCK_MODEL: &str = "mock";

/// The offline mock and, when configured, a live chat-completion endpoint.
#[derive(Clone)]
pub struct Backends {
    pub mock: Arc<dyn LlmBackend>,
    pub live: Option<Arc<dyn LlmBackend>>,
}

impl Backends {
    pub fn offline() -> Self {
        Self {
            mock: Arc::new(MockBackend::new()),
            live: None,
        }
    }

    /// Adds the live backend when the environment names an endpoint.
    pub fn from_env() -> Self {
        let live = HttpConfig::from_env()
            .ok()
            .map(|c| Arc::new(HttpBackend::new(c)) as Arc<dyn LlmBackend>);
        Self { live, ..Self::offline() }
    }

    pub fn pick(&self, live: bool) -> Result<Arc<dyn LlmBackend>, ApiError> {
        if !live {
            return Ok(self.mock.clone());
        }
        self.live
            .clone()
            .ok_or_else(|| ApiError::backend("live backend not configured; set BREX_LLM_ENDPOINT and BREX_LLM_API_KEY"))
    }

    /// Backend that produced a record, so follow-ups stay on it.
    pub fn for_record(&self, rec: &ExplanationRecord) -> Result<Arc<dyn LlmBackend>, ApiError> {
        let live = rec.backend.as_ref().is_some_and(|b| b.model != MOCK_MODEL);
        self.pick(live)
    }
}

fn eval_err(e: EvalError) -> ApiError {
    ApiError::invalid(e.to_string())
}

// episodes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub id: String,
    pub behavior: Behavior,
    pub seed: u64,
    pub steps: usize,
}

pub fn create_episode(store: &ArtifactStore, behavior: Behavior, env: EnvConfig) -> Result<EpisodeSummary, ApiError> {
    env.validate().map_err(|e| ApiError::invalid(e.to_string()))?;
    let p = behavior.policy();
    let traj = rollout(p, p, &env).map_err(|e| ApiError::invalid(e.to_string()))?;
    let id = store.put_episode(&EpisodeHeader { behavior, env }, &traj)?;
    Ok(EpisodeSummary {
        id,
        behavior,
        seed: env.seed,
        steps: traj.len(),
    })
}

pub fn list_episodes(store: &ArtifactStore) -> Result<Vec<EpisodeSummary>, ApiError> {
    store
        .ids(Kind::Episode)?
        .into_iter()
        .map(|id| {
            let (h, t) = store.get_episode(&id)?;
            Ok(EpisodeSummary {
                id,
                behavior: h.behavior,
                seed: h.env.seed,
                steps: t.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub episode: String,
    pub t: usize,
    pub behavior: Behavior,
    pub step: brex_core::rollout::TrajectoryStep,
    pub features: String,
    pub observation_text: String,
}

pub fn episode_step(store: &ArtifactStore, id: &str, t: usize) -> Result<StepView, ApiError> {
    let (h, traj) = store.get_episode(id)?;
    let step = traj
        .steps
        .get(t)
        .ok_or_else(|| ApiError::invalid(format!("timestep {t} out of range for a {}-step episode", traj.len())))?;
    Ok(StepView {
        episode: id.to_string(),
        t,
        behavior: h.behavior,
        features: encode_features(&step.observation).to_bitstring(),
        observation_text: render_observation(&step.observation),
        step: step.clone(),
    })
}

// trees

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSummary {
    pub id: String,
    pub behavior: Behavior,
    pub role: Role,
    pub depth: usize,
    pub leaves: usize,
    pub fidelity: FidelitySummary,
    pub current: bool,
}

fn tree_summary(store: &ArtifactStore, id: String, art: &TreeArtifact) -> Result<TreeSummary, ApiError> {
    let current = store.current_tree(art.behavior, art.role)?.as_deref() == Some(id.as_str());
    Ok(TreeSummary {
        depth: art.tree.depth(),
        leaves: art.tree.leaf_count(),
        behavior: art.behavior,
        role: art.role,
        fidelity: art.fidelity,
        current,
        id,
    })
}

/// Distills a tree, measures its fidelity on fresh episodes and makes it the
/// current tree for its behavior and role.
pub fn distill_tree(
    store: &ArtifactStore,
    cfg: &ServiceConfig,
    behavior: Behavior,
    role: Role,
) -> Result<TreeSummary, ApiError> {
    cfg.validate()?;
    let dcfg = cfg.distill_config();
    let run = dagger_distill(behavior.policy(), role, &dcfg).map_err(|e| ApiError::invalid(e.to_string()))?;
    let fid_env = dcfg.env.with_seed(derive_seed(dcfg.env.seed, FIDELITY_STREAM, 0));
    let counts = eval_fidelity_counts(&run.tree, behavior.policy(), role, cfg.fidelity_episodes, &fid_env)
        .map_err(|e| ApiError::invalid(e.to_string()))?;
    let art = TreeArtifact {
        schema_version: STORE_SCHEMA_VERSION,
        behavior,
        role,
        config: dcfg,
        best_iteration: run.best_iteration,
        iterations: run.iterations,
        fidelity: FidelitySummary {
            episodes: cfg.fidelity_episodes,
            matches: counts.matches as u64,
            total: counts.total as u64,
            accuracy: counts.accuracy(),
        },
        tree: run.tree,
    };
    let id = store.put_tree(&art)?;
    store.set_current_tree(behavior, role, &id)?;
    tree_summary(store, id, &art)
}

pub fn list_trees(store: &ArtifactStore) -> Result<Vec<TreeSummary>, ApiError> {
    store
        .ids(Kind::Tree)?
        .into_iter()
        .map(|id| {
            let art = store.get_tree(&id)?;
            tree_summary(store, id, &art)
        })
        .collect()
}

fn resolve_tree(store: &ArtifactStore, behavior: Behavior, role: Role, id: Option<&str>) -> Result<(String, TreeArtifact), ApiError> {
    let id = match id {
        Some(id) => id.to_string(),
        None => store.current_tree(behavior, role)?.ok_or_else(|| {
            ApiError::not_found(format!("no distilled tree for {behavior} {role}; run distill first"))
        })?,
    };
    let art = store.get_tree(&id)?;
    if art.behavior != behavior || art.role != role {
        return Err(ApiError::invalid(format!(
            "tree {id} belongs to {} {}, not {behavior} {role}",
            art.behavior, art.role
        )));
    }
    Ok((id, art))
}

/// Plain-text fidelity table over the current trees.
pub fn fidelity_table(store: &ArtifactStore) -> Result<String, ApiError> {
    let mut out = String::from("Tree fidelity\n");
    out.push_str(&format!("{:<9} {:<9} {:<17} {:>8} {:>9}\n", "Behavior", "Role", "Tree", "Episodes", "Fidelity"));
    for b in Behavior::ALL {
        for r in Role::ALL {
            if let Some(id) = store.current_tree(b, r)? {
                let art = store.get_tree(&id)?;
                out.push_str(&format!(
                    "{:<9} {:<9} {:<17} {:>8} {:>9.4}\n",
                    b.label(),
                    r.name(),
                    id,
                    art.fidelity.episodes,
                    art.fidelity.accuracy
                ));
            }
        }
    }
    Ok(out)
}

// explanations

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplainRequest {
    pub episode: String,
    pub t: usize,
    pub role: Role,
    pub br_kind: BrKind,
    #[serde(default)]
    pub live: bool,
    /// Defaults to the current tree for the episode's behavior and role.
    #[serde(default)]
    pub tree: Option<String>,
}

#[derive(Serialize)]
struct RecordKey<'a> {
    episode: &'a str,
    t: usize,
    role: Role,
    br_kind: BrKind,
    live: bool,
    tree: &'a str,
    states_k: usize,
}

/// Resolves the request to its record id without calling any backend.
pub fn explanation_id(store: &ArtifactStore, cfg: &ServiceConfig, req: &ExplainRequest) -> Result<String, ApiError> {
    let (h, _) = store.get_episode(&req.episode)?;
    let (tree_id, _) = resolve_tree(store, h.behavior, req.role, req.tree.as_deref())?;
    let key = RecordKey {
        episode: &req.episode,
        t: req.t,
        role: req.role,
        br_kind: req.br_kind,
        live: req.live,
        tree: &tree_id,
        states_k: cfg.states_k,
    };
    Ok(content_id(&serde_json::to_vec(&key).expect("keys serialize")))
}

fn build_br(
    kind: BrKind,
    art: &TreeArtifact,
    traj: &Trajectory,
    t: usize,
    role: Role,
    k: usize,
    seed: u64,
) -> Result<BehaviorRepresentation, ApiError> {
    Ok(match kind {
        BrKind::Path => BehaviorRepresentation::Path {
            path: extract_path(&art.tree, &encode_features(&traj.steps[t].observation))
                .map_err(|e| ApiError::invalid(e.to_string()))?,
        },
        BrKind::States => sample_states_br(traj, role, k.min(traj.len()), seed).map_err(|e| ApiError::invalid(e.to_string()))?,
        BrKind::None => BehaviorRepresentation::None,
    })
}

/// Creates, explains and stores a record, or returns the stored one for an
/// identical request. Returns whether a new record was made.
pub fn explain(
    store: &ArtifactStore,
    cfg: &ServiceConfig,
    backends: &Backends,
    req: &ExplainRequest,
) -> Result<(ExplanationRecord, bool), ApiError> {
    let id = explanation_id(store, cfg, req)?;
    if store.exists(Kind::Explanation, &id) {
        return Ok((store.get_record(&id)?, false));
    }
    let backend = backends.pick(req.live)?;
    let (h, traj) = store.get_episode(&req.episode)?;
    if req.t >= traj.len() {
        return Err(ApiError::invalid(format!("timestep {} out of range for a {}-step episode", req.t, traj.len())));
    }
    let (_, art) = resolve_tree(store, h.behavior, req.role, req.tree.as_deref())?;
    let step = &traj.steps[req.t];
    let tree_action = art
        .tree
        .predict(&encode_features(&step.observation))
        .map_err(|e| ApiError::invalid(e.to_string()))?;
    let seed = u64::from_str_radix(&id, 16).expect("ids are hex");
    let br = build_br(req.br_kind, &art, &traj, req.t, req.role, cfg.states_k, seed)?;
    let input = ExplainInput {
        behavior: h.behavior,
        role: req.role,
        observation: step.observation.clone(),
        action: step.action(req.role),
        tree_action,
        br,
        state_category: categorize_state(&traj, req.t, req.role).ok(),
        origin: Some(StateOrigin {
            episode: req.episode.clone(),
            t: req.t,
        }),
    };
    let mut rec = ExplanationRecord::prepare(id, input)?;
    request_explanation(&mut rec, backend.as_ref())?;
    request_action_prediction(&mut rec, backend.as_ref())?;
    store.put_record(&rec)?;
    Ok((rec, true))
}

/// One follow-up turn. Callers serialize turns per record.
pub fn chat(store: &ArtifactStore, backends: &Backends, id: &str, text: &str) -> Result<(String, ExplanationRecord), ApiError> {
    if text.trim().is_empty() {
        return Err(ApiError::invalid("message is empty"));
    }
    let mut rec = store.get_record(id)?;
    let backend = backends.for_record(&rec)?;
    let reply = follow_up(&mut rec, text, backend.as_ref())?;
    store.put_record(&rec)?;
    Ok((reply, rec))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub id: String,
    pub behavior: Behavior,
    pub role: Role,
    pub br_kind: BrKind,
    pub state_category: Option<StateCategory>,
    pub labeled: bool,
}

pub fn list_records(store: &ArtifactStore) -> Result<Vec<RecordSummary>, ApiError> {
    store
        .ids(Kind::Explanation)?
        .into_iter()
        .map(|id| {
            let r = store.get_record(&id)?;
            Ok(RecordSummary {
                labeled: store.get_labels(&id).is_ok(),
                id,
                behavior: r.behavior,
                role: r.role,
                br_kind: r.br_kind,
                state_category: r.state_category,
            })
        })
        .collect()
}

// labels and reports

/// Attaches labels to a stored record, replacing earlier ones.
pub fn attach_labels(store: &ArtifactStore, id: &str, mut labels: AnnotationLabels) -> Result<LabeledItem, ApiError> {
    let rec = store.get_record(id)?;
    if labels.record_id.is_empty() {
        labels.record_id = id.to_string();
    }
    if labels.record_id != id {
        return Err(ApiError::invalid(format!("labels name record '{}', posted to '{id}'", labels.record_id)));
    }
    labels.validate().map_err(ApiError::invalid)?;
    let item = LabeledItem {
        key: CellKey {
            behavior: rec.behavior,
            br_kind: rec.br_kind,
            state_category: rec.state_category,
        },
        labels,
    };
    store.put_labels(&item)?;
    Ok(item)
}

/// Imports labeled items as they are, e.g. from a label file.
pub fn import_labels(store: &ArtifactStore, items: &[LabeledItem]) -> Result<usize, ApiError> {
    for (i, item) in items.iter().enumerate() {
        item.labels.validate().map_err(|e| ApiError::invalid(format!("item {}: {e}", i + 1)))?;
    }
    for item in items {
        store.put_labels(item)?;
    }
    Ok(items.len())
}

pub fn parse_label_lines(text: &str) -> Result<Vec<LabeledItem>, ApiError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ApiError::invalid(format!("line {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct AccuracyPayload {
    pub table: String,
    pub report: AccuracyReport,
}

pub fn accuracy_report(store: &ArtifactStore) -> Result<AccuracyPayload, ApiError> {
    let report = AccuracyReport::from_items(&store.all_labels()?);
    Ok(AccuracyPayload {
        table: report.text(),
        report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct HallucinationPayload {
    pub table: String,
    pub report: HallucinationReport,
    /// Across cells: explanation hallucination rate against action-prediction accuracy.
    pub correlation: Option<PearsonResult>,
}

pub fn hallucination_report(store: &ArtifactStore) -> Result<HallucinationPayload, ApiError> {
    let items = store.all_labels()?;
    let report = HallucinationReport::from_items(&items);
    Ok(HallucinationPayload {
        table: report.table.clone(),
        correlation: hallucination_action_correlation(&items).ok(),
        report,
    })
}

// evaluation batches

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBatch {
    pub episodes: Vec<String>,
    pub records: Vec<String>,
    /// Roles for which fewer states than requested were found.
    pub shortfall: Vec<brex_core::eval::Shortfall>,
}

/// Samples gated states and explains each under every representation.
/// Fixed has no state categories, so its states are drawn from all gated steps.
#[allow(clippy::too_many_arguments)]
pub fn eval_batch(
    store: &ArtifactStore,
    cfg: &ServiceConfig,
    backends: &Backends,
    behavior: Behavior,
    category: Option<StateCategory>,
    n_per_role: usize,
    seed: u64,
    live: bool,
) -> Result<EvalBatch, ApiError> {
    let (_, medic) = resolve_tree(store, behavior, Role::Medic, None)?;
    let (_, engineer) = resolve_tree(store, behavior, Role::Engineer, None)?;
    let pair = TreePair {
        medic: &medic.tree,
        engineer: &engineer.tree,
    };
    let (states, shortfall): (Vec<(u64, usize, Role)>, _) = match (behavior, category) {
        (Behavior::Fixed, Some(_)) => return Err(ApiError::invalid("fixed behavior has no state categories")),
        (Behavior::Fixed, None) => fixed_states(cfg, pair, n_per_role, seed)?,
        (_, None) => return Err(ApiError::invalid(format!("--category is required for {behavior}"))),
        (_, Some(category)) => {
            let out = sample_eval_states(
                &SampleRequest {
                    behavior,
                    category,
                    n_per_role,
                    seed,
                    budget_episodes: cfg.eval_budget,
                    env: cfg.env,
                },
                pair,
            )
            .map_err(eval_err)?;
            (out.states.iter().map(|s| (s.env_seed, s.t, s.role)).collect(), out.shortfall)
        }
    };
    let mut batch = EvalBatch {
        episodes: Vec::new(),
        records: Vec::new(),
        shortfall,
    };
    for (env_seed, t, role) in states {
        let ep = create_episode(store, behavior, cfg.env.with_seed(env_seed))?;
        for br_kind in BrKind::ALL {
            let req = ExplainRequest {
                episode: ep.id.clone(),
                t,
                role,
                br_kind,
                live,
                tree: None,
            };
            batch.records.push(explain(store, cfg, backends, &req)?.0.id);
        }
        if !batch.episodes.contains(&ep.id) {
            batch.episodes.push(ep.id);
        }
    }
    Ok(batch)
}

type Picked = (Vec<(u64, usize, Role)>, Vec<brex_core::eval::Shortfall>);

fn fixed_states(cfg: &ServiceConfig, pair: TreePair<'_>, n_per_role: usize, seed: u64) -> Result<Picked, ApiError> {
    let p = Behavior::Fixed.policy();
    let mut out = Vec::new();
    let mut shortfall = Vec::new();
    for (slot, role) in Role::ALL.into_iter().enumerate() {
        let mut found = 0;
        for i in 0..cfg.eval_budget as u64 {
            if found == n_per_role {
                break;
            }
            let env_seed = derive_seed(seed, FIXED_SAMPLE_STREAM + slot as u64, i);
            let traj = rollout(p, p, &cfg.env.with_seed(env_seed)).map_err(|e| ApiError::invalid(e.to_string()))?;
            let t = sample_indices(traj.len(), 1, env_seed)[0];
            let s = &traj.steps[t];
            let tree_action = pair
                .get(role)
                .predict(&encode_features(&s.observation))
                .map_err(|e| ApiError::invalid(e.to_string()))?;
            if tree_action == s.action(role) {
                out.push((env_seed, t, role));
                found += 1;
            }
        }
        if found < n_per_role {
            shortfall.push(brex_core::eval::Shortfall {
                role,
                requested: n_per_role,
                found,
            });
        }
    }
    Ok((out, shortfall))
}
